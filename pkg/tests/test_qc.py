import numpy as np
import pytest

from exprbench.combat import combat_apply, combat_fit
from exprbench.errors import InsufficientBatchesError, RankDeficiencyError
from exprbench.qc import (
    BIMODALITY_THRESHOLD,
    cross_batch_dea_check,
    mixture_score,
    multimodality_screen,
    pca,
)
from exprbench.synth import generate_synthetic
from helpers import make_dataset, make_matrix


class TestPca:
    def test_collinear_samples_give_single_component(self):
        t = np.linspace(0, 1, 30)
        values = np.vstack([2.0 * t + 1.0, -3.0 * t + 0.5])   # 2 genes on a line
        result = pca(make_matrix(values), 1)
        assert result.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-10)

    def test_isotropic_gaussian_splits_variance_evenly(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(3, 10000))
        result = pca(make_matrix(values), 3)
        for ratio in result.explained_variance_ratio:
            assert ratio == pytest.approx(1.0 / 3.0, abs=0.02)

    def test_full_rank_ratios_sum_to_one(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=(6, 40))
        result = pca(make_matrix(values), 6)
        assert sum(result.explained_variance_ratio) == pytest.approx(1.0, abs=1e-9)

    def test_ratios_non_increasing(self):
        rng = np.random.default_rng(2)
        result = pca(make_matrix(rng.normal(size=(8, 30))), 5)
        ratios = result.explained_variance_ratio
        assert all(b <= a + 1e-12 for a, b in zip(ratios, ratios[1:]))

    def test_rank_deficiency_error(self):
        t = np.linspace(0, 1, 10)
        values = np.vstack([t, 2 * t])     # rank 1 after centering
        with pytest.raises(RankDeficiencyError):
            pca(make_matrix(values), 2)

    def test_reconstruction(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=(7, 25))
        m = make_matrix(values)
        result = pca(m, 7)
        centered = (values - values.mean(axis=1, keepdims=True)).T
        approx = result.components @ result.loadings.T
        err = np.linalg.norm(approx - centered) / np.linalg.norm(centered)
        assert err < 1e-8

    def test_deterministic_sign(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=(5, 20))
        r1 = pca(make_matrix(values), 3)
        r2 = pca(make_matrix(values.copy()), 3)
        np.testing.assert_array_equal(r1.components, r2.components)
        for j in range(3):
            pivot = np.argmax(np.abs(r1.loadings[:, j]))
            assert r1.loadings[pivot, j] > 0


class TestMixtureScore:
    def test_identical_batches_near_half(self):
        ds, _ = generate_synthetic(n_batches=2, samples_per_batch=150, n_genes=30,
                                   n_condition_genes=0, seed=5, log_scale=True)
        report = mixture_score(ds.matrix, ds.metadata, k=20)
        assert report.mean_score == pytest.approx(0.5, abs=0.05)
        for score in report.per_condition.values():
            assert 0.0 <= score <= 1.0

    def test_separated_batches_near_zero(self):
        ds, _ = generate_synthetic(n_batches=2, samples_per_batch=120, n_genes=30,
                                   batch_gamma=[0.0, 50.0], n_condition_genes=0,
                                   seed=6, log_scale=True)
        report = mixture_score(ds.matrix, ds.metadata, k=20)
        assert report.mean_score <= 0.02

    def test_batch_relabeling_invariance(self):
        ds, _ = generate_synthetic(n_batches=2, samples_per_batch=60, n_genes=25,
                                   n_condition_genes=0, seed=7, log_scale=True)
        report = mixture_score(ds.matrix, ds.metadata, k=10)
        renamed = [rec.__class__(rec.sample_id, rec.subject_id,
                                 "X" + rec.batch, rec.condition)
                   for rec in ds.metadata]
        report2 = mixture_score(ds.matrix, renamed, k=10)
        assert report.mean_score == pytest.approx(report2.mean_score, abs=1e-12)

    def test_single_batch_condition_rejected(self):
        values = np.random.default_rng(8).normal(size=(10, 20))
        ds = make_dataset(values, ["A"] * 20, ["Case"] * 10 + ["Control"] * 10)
        with pytest.raises(InsufficientBatchesError):
            mixture_score(ds.matrix, ds.metadata, k=3)


class TestMultimodality:
    def test_uniform_near_five_ninths(self):
        rng = np.random.default_rng(9)
        m = make_matrix(rng.uniform(0, 1, size=(1, 30000)))
        (_, bc), = multimodality_screen(m)
        assert bc == pytest.approx(5.0 / 9.0, abs=0.02)

    def test_normal_near_one_third(self):
        rng = np.random.default_rng(10)
        m = make_matrix(rng.normal(size=(1, 30000)))
        (_, bc), = multimodality_screen(m)
        assert bc == pytest.approx(1.0 / 3.0, abs=0.02)

    def test_balanced_mixture_flagged(self):
        rng = np.random.default_rng(11)
        n = 20000
        bimodal = np.concatenate([rng.normal(-3, 1, n // 2), rng.normal(3, 1, n // 2)])
        m = make_matrix(bimodal[None, :])
        (_, bc), = multimodality_screen(m)
        assert bc > BIMODALITY_THRESHOLD

    def test_affine_invariance(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=2000)
        m1 = make_matrix(x[None, :])
        m2 = make_matrix((3.5 * x - 11.0)[None, :])
        (_, bc1), = multimodality_screen(m1)
        (_, bc2), = multimodality_screen(m2)
        assert bc1 == pytest.approx(bc2, abs=1e-10)

    def test_sorted_descending_with_gene_ids(self):
        rng = np.random.default_rng(13)
        n = 5000
        values = np.vstack([
            rng.normal(size=n),
            np.concatenate([rng.normal(-3, 1, n // 2), rng.normal(3, 1, n // 2)]),
            rng.uniform(size=n),
        ])
        pairs = multimodality_screen(make_matrix(values))
        assert pairs[0][0] == "G1"
        scores = [v for _, v in pairs]
        assert scores == sorted(scores, reverse=True)


class TestCrossBatchCheck:
    def test_null_and_planted_and_corrected(self):
        # Null: identically distributed batches barely flag anything.
        null_ds, _ = generate_synthetic(n_batches=2, samples_per_batch=60,
                                        n_genes=500, n_condition_genes=0,
                                        seed=14, log_scale=True)
        counts = cross_batch_dea_check(null_ds)
        assert all(c <= 5 for c in counts.values())

        # Planted shift in 50 of 500 genes: nearly all detected pre-correction.
        rng = np.random.default_rng(15)
        values = rng.normal(size=(500, 120))
        values[:50, 60:] += 2.0
        conditions = (["Case", "Control"] * 30) * 2
        ds = make_dataset(values, ["A"] * 60 + ["B"] * 60, conditions)
        counts = cross_batch_dea_check(ds)
        flagged = max(counts.values())
        assert flagged >= 45

        # The same data after correction drops almost everything.
        model = combat_fit(ds, covariate="condition")
        corrected = ds.with_matrix(combat_apply(ds, model))
        post_counts = cross_batch_dea_check(corrected)
        assert all(c < 5 for c in post_counts.values())
