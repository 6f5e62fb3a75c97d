import json

import numpy as np
import pytest

from exprbench.boosting import (
    Hyperparams,
    TreeEnsemble,
    _soft_threshold,
    _TreeBuilder,
    learning_curve,
    predict_margin,
    predict_proba,
    train,
)
from exprbench.errors import (
    FeatureCountMismatchError,
    SingleClassError,
    ValidationError,
)
from exprbench.metrics import evaluate


def _separable_toy(n=50, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    y = (x[:, 1] > 0).astype(int)
    return x, y


def exhaustive_best_split(x, g, h, reg_lambda, gamma, min_child_weight):
    """Definitional split search: every feature, every midpoint threshold,
    gain computed from scratch with plain sums."""
    n, n_features = x.shape
    g_total, h_total = g.sum(), h.sum()
    parent = g_total ** 2 / (h_total + reg_lambda)
    best = None
    for f in range(n_features):
        for thr in sorted(set((a + b) / 2
                              for a, b in zip(sorted(x[:, f])[:-1], sorted(x[:, f])[1:])
                              if a != b)):
            mask = x[:, f] < thr
            gl, hl = g[mask].sum(), h[mask].sum()
            gr, hr = g_total - gl, h_total - hl
            if hl < min_child_weight or hr < min_child_weight:
                continue
            gain = 0.5 * (gl ** 2 / (hl + reg_lambda)
                          + gr ** 2 / (hr + reg_lambda) - parent) - gamma
            if gain > 0 and (best is None or gain > best[2] + 1e-15):
                best = (f, thr, gain)
    return best


class TestHyperparams:
    def test_bounds_enforced(self):
        with pytest.raises(ValidationError):
            Hyperparams(n_estimators=10)
        with pytest.raises(ValidationError):
            Hyperparams(max_depth=1)
        with pytest.raises(ValidationError):
            Hyperparams(scale_pos_weight=0.5)

    def test_categorical_weight_choices(self):
        Hyperparams(scale_pos_weight=1.0)
        Hyperparams(scale_pos_weight=400.0 / 510.0)

    def test_dict_roundtrip(self):
        hp = Hyperparams(n_estimators=77, max_depth=5, learning_rate=0.3)
        assert Hyperparams.from_dict(hp.to_dict()) == hp


class TestLeafWeights:
    def test_newton_step_without_l1(self):
        # w = -G / (H + lambda) when the L1 threshold is zero
        assert -_soft_threshold(-2.0, 0.0) / (4.0 + 1.0) == 0.4

    def test_l1_shrinks_and_zeroes(self):
        assert _soft_threshold(-2.0, 0.5) == -1.5
        assert _soft_threshold(2.0, 0.5) == 1.5
        assert _soft_threshold(0.3, 0.5) == 0.0

    def test_builder_leaf_uses_soft_threshold(self):
        hp = Hyperparams(reg_alpha=0.5, reg_lambda=1.0, learning_rate=1.0,
                         max_depth=2, min_child_weight=1.0)
        x = np.array([[1.0], [1.0]])
        g = np.array([-1.5, -0.5])        # G = -2
        h = np.array([2.0, 2.0])          # H = 4
        builder = _TreeBuilder(x, g, h, hp)
        builder.build(np.arange(2), 0)
        tree = builder.finish()
        assert tree.feature[0] == -1      # constant feature cannot split
        assert tree.weight[0] == pytest.approx((2.0 - 0.5) / 5.0)
        assert tree.cover[0] == 4.0


class TestSplitSearch:
    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            n = 6
            x = rng.normal(size=(n, 3))
            g = rng.normal(size=n)
            h = rng.uniform(0.1, 1.0, size=n)
            hp = Hyperparams(reg_lambda=1.0, gamma=1e-4, min_child_weight=1.0,
                             learning_rate=1.0)
            builder = _TreeBuilder(x, g, h, hp)
            got = builder._best_split(np.arange(n))
            want = exhaustive_best_split(x, g, h, 1.0, 1e-4, 1.0)
            if want is None:
                assert got is None
            else:
                assert got is not None
                f, thr, gain = got
                assert gain == pytest.approx(want[2], abs=1e-10)


class TestTraining:
    def test_overfits_separable_toy(self):
        x, y = _separable_toy()
        hp = Hyperparams(n_estimators=100, max_depth=3, learning_rate=0.3)
        model = train(x, y, hp)
        assert evaluate(model, x, y).f1_macro == 1.0

    def test_logloss_non_increasing(self):
        x, y = _separable_toy(seed=2)
        hp = Hyperparams(n_estimators=60, max_depth=3, learning_rate=0.2)
        model = train(x, y, hp)
        losses = model.train_logloss
        assert len(losses) == 61
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_single_class_rejected(self):
        x = np.random.default_rng(3).normal(size=(10, 2))
        with pytest.raises(SingleClassError):
            train(x, np.ones(10), Hyperparams())

    def test_depth_and_child_weight_respected(self):
        x, y = _separable_toy(n=80, seed=4)
        hp = Hyperparams(n_estimators=50, max_depth=3, min_child_weight=3.0,
                         learning_rate=0.3)
        model = train(x, y, hp)
        for tree in model.trees:
            assert tree.depth() <= 3
            for node in range(tree.n_nodes):
                if tree.feature[node] >= 0:
                    for child in (tree.left[node], tree.right[node]):
                        assert tree.cover[child] >= 3.0 - 1e-12

    def test_deterministic(self):
        x, y = _separable_toy(seed=5)
        hp = Hyperparams(n_estimators=60, max_depth=4, learning_rate=0.1)
        assert train(x, y, hp).to_json() == train(x, y, hp).to_json()

    def test_scale_pos_weight_changes_prior(self):
        x, y = _separable_toy(seed=8)
        m1 = train(x, y, Hyperparams(scale_pos_weight=1.0))
        m2 = train(x, y, Hyperparams(scale_pos_weight=400.0 / 510.0))
        assert m2.base_score < m1.base_score


class TestPredict:
    def test_empty_ensemble_gives_prior(self):
        hp = Hyperparams()
        ensemble = TreeEnsemble([], base_score=0.7, hp=hp, feature_names=("a", "b"))
        proba = predict_proba(ensemble, np.zeros((5, 2)))
        np.testing.assert_allclose(proba, 1.0 / (1.0 + np.exp(-0.7)))

    def test_single_split_partitions_samples(self):
        x = np.arange(16, dtype=float)[:, None]
        y = (x[:, 0] >= 8).astype(int)
        hp = Hyperparams(n_estimators=50, max_depth=2, learning_rate=0.5)
        model = train(x, y, hp)
        model.trees = model.trees[:1]
        proba = predict_proba(model, x)
        assert len(set(proba.tolist())) == 2
        assert len(set(proba[:8].tolist())) == 1
        assert len(set(proba[8:].tolist())) == 1

    def test_margin_additivity(self):
        x, y = _separable_toy(seed=9)
        hp = Hyperparams(n_estimators=60, max_depth=3, learning_rate=0.2)
        model = train(x, y, hp)
        half = len(model.trees) // 2
        a = TreeEnsemble(model.trees[:half], model.base_score, hp,
                         model.feature_names)
        b = TreeEnsemble(model.trees[half:], model.base_score, hp,
                         model.feature_names)
        lhs = predict_margin(model, x)
        rhs = predict_margin(a, x) + predict_margin(b, x) - model.base_score
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_feature_count_mismatch(self):
        x, y = _separable_toy(seed=10)
        model = train(x, y, Hyperparams())
        with pytest.raises(FeatureCountMismatchError):
            predict_margin(model, x[:, :2])


class TestSerialization:
    def test_json_roundtrip_preserves_predictions(self):
        x, y = _separable_toy(seed=11)
        hp = Hyperparams(n_estimators=55, max_depth=4, learning_rate=0.15,
                         reg_alpha=0.01, gamma=0.01)
        model = train(x, y, hp)
        again = TreeEnsemble.from_json(model.to_json())
        np.testing.assert_array_equal(predict_margin(model, x),
                                      predict_margin(again, x))
        assert again.hp == hp
        payload = json.loads(model.to_json())
        assert payload["format_version"] == 1
        node_keys = set(payload["trees"][0])
        assert node_keys == {"feature", "threshold", "left", "right", "weight",
                             "cover", "default_left"}


class TestLearningCurve:
    def _data(self, seed=12, n=60):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 5))
        y = (x[:, 0] + 0.5 * rng.normal(size=n) > 0).astype(int)
        groups = [f"P{i // 2}" for i in range(n)]
        return x, y, groups

    def test_full_fraction_matches_plain_cv(self):
        from exprbench.tune import cross_validated_f1

        x, y, groups = self._data()
        hp = Hyperparams(n_estimators=50, max_depth=2, learning_rate=0.2)
        rows = learning_curve(x, y, hp, [1.0], folds=3, seed=3, groups=groups)
        mean_val, _, _ = cross_validated_f1(x, y, groups, hp, folds=3, seed=3)
        assert rows[0][2] == pytest.approx(mean_val, abs=1e-12)

    def test_validation_improves_and_train_dominates(self):
        hp = Hyperparams(n_estimators=50, max_depth=2, learning_rate=0.2)
        lows, highs, gaps = [], [], []
        for seed in range(5):
            x, y, groups = self._data(seed=20 + seed, n=80)
            rows = learning_curve(x, y, hp, [0.3, 1.0], folds=3,
                                  seed=seed, groups=groups)
            lows.append(rows[0][2])
            highs.append(rows[1][2])
            gaps.extend(r[1] - r[2] for r in rows)
        assert np.median(highs) >= np.median(lows) - 0.05
        assert np.median(gaps) >= 0.0
