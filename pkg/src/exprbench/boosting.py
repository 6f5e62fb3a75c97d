"""Second-order gradient-boosted trees for binary classification.

Boosting minimizes logistic loss with exact greedy splits: every
(feature, threshold) pair is scored by the regularized gain

    0.5 * [G_L^2/(H_L + lambda) + G_R^2/(H_R + lambda)
           - (G_L + G_R)^2 / (H_L + H_R + lambda)] - gamma

and a split is kept only when the gain is positive and both children
carry at least ``min_child_weight`` of hessian mass. Leaf weights apply
an L1 soft threshold: w = -sign(G) * max(0, |G| - alpha) / (H + lambda),
scaled by the learning rate. Positive-class instances are up-weighted by
``scale_pos_weight`` inside the gradient and hessian.

Node cover (hessian sums) is stored per node; downstream attribution
requires it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FeatureCountMismatchError, SingleClassError, ValidationError

SCALE_POS_WEIGHT_CHOICES = (1.0, 400.0 / 510.0)


@dataclass(frozen=True)
class Hyperparams:
    n_estimators: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    gamma: float = 1e-4
    reg_alpha: float = 1e-4
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    scale_pos_weight: float = 1.0

    def __post_init__(self):
        checks = [
            ("n_estimators", self.n_estimators, 50, 600),
            ("max_depth", self.max_depth, 2, 15),
            ("gamma", self.gamma, 1e-4, 100.0),
            ("reg_alpha", self.reg_alpha, 1e-4, 100.0),
            ("reg_lambda", self.reg_lambda, 1e-4, 100.0),
            ("min_child_weight", self.min_child_weight, 1.0, 10.0),
        ]
        for name, value, lo, hi in checks:
            if not lo <= value <= hi:
                raise ValidationError(f"{name}={value} outside [{lo}, {hi}]")
        if not 0.001 <= self.learning_rate <= 1.0:
            raise ValidationError(
                f"learning_rate={self.learning_rate} outside (0.001, 1]"
            )
        if not any(abs(self.scale_pos_weight - c) < 1e-12
                   for c in SCALE_POS_WEIGHT_CHOICES):
            raise ValidationError(
                f"scale_pos_weight={self.scale_pos_weight} not in "
                f"{SCALE_POS_WEIGHT_CHOICES}"
            )

    def to_dict(self) -> dict:
        return {
            "n_estimators": self.n_estimators,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "gamma": self.gamma,
            "reg_alpha": self.reg_alpha,
            "reg_lambda": self.reg_lambda,
            "min_child_weight": self.min_child_weight,
            "scale_pos_weight": self.scale_pos_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(
            n_estimators=int(d["n_estimators"]),
            max_depth=int(d["max_depth"]),
            learning_rate=float(d["learning_rate"]),
            gamma=float(d["gamma"]),
            reg_alpha=float(d["reg_alpha"]),
            reg_lambda=float(d["reg_lambda"]),
            min_child_weight=float(d["min_child_weight"]),
            scale_pos_weight=float(d["scale_pos_weight"]),
        )


@dataclass
class Tree:
    """Flat node arrays in preorder; leaves have feature == -1 and carry
    their weight; every node records its cover (training hessian sum)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray
    cover: np.ndarray
    default_left: np.ndarray   # reserved in the format; always True here

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        while True:
            at_leaf = self.feature[node] < 0
            if np.all(at_leaf):
                break
            f = np.where(at_leaf, 0, self.feature[node])
            go_left = x[np.arange(len(x)), f] < self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(at_leaf, node, nxt)
        return self.weight[node]

    def expected_value(self) -> float:
        """Cover-weighted mean leaf value (training distribution)."""
        def rec(i: int) -> float:
            if self.feature[i] < 0:
                return float(self.weight[i])
            l, r = self.left[i], self.right[i]
            return (self.cover[l] * rec(l) + self.cover[r] * rec(r)) / self.cover[i]
        return rec(0)

    def depth(self) -> int:
        def rec(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)


@dataclass
class TreeEnsemble:
    trees: list[Tree]
    base_score: float
    hp: Hyperparams
    feature_names: tuple[str, ...]
    train_logloss: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        payload = {
            "format_version": 1,
            "base_score": self.base_score,
            "hyperparams": self.hp.to_dict(),
            "feature_names": list(self.feature_names),
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "weight": t.weight.tolist(),
                    "cover": t.cover.tolist(),
                    "default_left": t.default_left.tolist(),
                }
                for t in self.trees
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        d = json.loads(text)
        trees = [
            Tree(
                feature=np.array(t["feature"], dtype=np.int64),
                threshold=np.array(t["threshold"], dtype=np.float64),
                left=np.array(t["left"], dtype=np.int64),
                right=np.array(t["right"], dtype=np.int64),
                weight=np.array(t["weight"], dtype=np.float64),
                cover=np.array(t.get("cover", []), dtype=np.float64),
                default_left=np.array(t.get("default_left",
                                            [True] * len(t["feature"])), dtype=bool),
            )
            for t in d["trees"]
        ]
        return cls(trees, float(d["base_score"]),
                   Hyperparams.from_dict(d["hyperparams"]),
                   tuple(d["feature_names"]))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _soft_threshold(g: float, alpha: float) -> float:
    return math.copysign(max(0.0, abs(g) - alpha), g)


class _TreeBuilder:
    def __init__(self, x: np.ndarray, g: np.ndarray, h: np.ndarray, hp: Hyperparams):
        self.x, self.g, self.h, self.hp = x, g, h, hp
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.weight: list[float] = []
        self.cover: list[float] = []

    def _alloc(self) -> int:
        for arr, fill in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1),
                          (self.right, -1), (self.weight, 0.0), (self.cover, 0.0)):
            arr.append(fill)
        return len(self.feature) - 1

    def _best_split(self, idx: np.ndarray):
        hp = self.hp
        xs = self.x[idx]
        g, h = self.g[idx], self.h[idx]
        n = len(idx)
        order = np.argsort(xs, axis=0, kind="stable")
        sorted_x = np.take_along_axis(xs, order, axis=0)
        gl = np.cumsum(g[order], axis=0)[:-1]
        hl = np.cumsum(h[order], axis=0)[:-1]
        g_total, h_total = g.sum(), h.sum()
        gr, hr = g_total - gl, h_total - hl

        gain = 0.5 * (gl ** 2 / (hl + hp.reg_lambda)
                      + gr ** 2 / (hr + hp.reg_lambda)
                      - g_total ** 2 / (h_total + hp.reg_lambda)) - hp.gamma
        invalid = (sorted_x[1:] <= sorted_x[:-1]) \
            | (hl < hp.min_child_weight) | (hr < hp.min_child_weight)
        gain[invalid] = -np.inf

        flat = int(np.argmax(gain))          # row-major: ties keep lowest threshold
        pos, feat = divmod(flat, gain.shape[1])
        if gain[pos, feat] <= 0:
            return None
        thr = 0.5 * (sorted_x[pos, feat] + sorted_x[pos + 1, feat])
        return feat, float(thr), float(gain[pos, feat])

    def build(self, idx: np.ndarray, depth: int) -> int:
        node = self._alloc()
        g_sum, h_sum = float(self.g[idx].sum()), float(self.h[idx].sum())
        self.cover[node] = h_sum

        split = None
        if depth < self.hp.max_depth and len(idx) >= 2:
            split = self._best_split(idx)
        if split is None:
            self.weight[node] = (-_soft_threshold(g_sum, self.hp.reg_alpha)
                                 / (h_sum + self.hp.reg_lambda)
                                 * self.hp.learning_rate)
            return node

        feat, thr, _ = split
        mask = self.x[idx, feat] < thr
        self.feature[node] = feat
        self.threshold[node] = thr
        self.left[node] = self.build(idx[mask], depth + 1)
        self.right[node] = self.build(idx[~mask], depth + 1)
        return node

    def finish(self) -> Tree:
        n = len(self.feature)
        return Tree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            weight=np.array(self.weight, dtype=np.float64),
            cover=np.array(self.cover, dtype=np.float64),
            default_left=np.ones(n, dtype=bool),
        )


def train(x: np.ndarray, y: np.ndarray, hp: Hyperparams, seed: int = 0,
          feature_names=None) -> TreeEnsemble:
    """Fit a boosted ensemble. Deterministic given input order; ``seed``
    is accepted for interface stability (no stochastic subsampling here).
    """
    del seed
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValidationError("x must be samples x features aligned with y")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features must be finite")
    classes = np.unique(y)
    if not np.array_equal(classes, [0.0, 1.0]):
        if len(classes) == 1:
            raise SingleClassError("labels contain a single class")
        raise ValidationError(f"labels must be binary 0/1, got {classes}")

    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(x.shape[1]))
    w = np.where(y == 1.0, hp.scale_pos_weight, 1.0)
    prior = float((w * y).sum() / w.sum())
    base_score = math.log(prior / (1.0 - prior))

    margin = np.full(len(y), base_score)
    losses = [_weighted_logloss(y, _sigmoid(margin), w)]
    trees: list[Tree] = []
    all_idx = np.arange(len(y))
    for _ in range(hp.n_estimators):
        p = _sigmoid(margin)
        grad = w * (p - y)
        hess = w * p * (1.0 - p)
        builder = _TreeBuilder(x, grad, hess, hp)
        builder.build(all_idx, 0)
        tree = builder.finish()
        trees.append(tree)
        margin = margin + tree.predict(x)
        losses.append(_weighted_logloss(y, _sigmoid(margin), w))

    return TreeEnsemble(trees, base_score, hp, tuple(feature_names),
                        train_logloss=losses)


def _weighted_logloss(y, p, w) -> float:
    eps = 1e-15
    p = np.clip(p, eps, 1.0 - eps)
    return float(-(w * (y * np.log(p) + (1 - y) * np.log(1 - p))).sum() / w.sum())


def predict_margin(ensemble: TreeEnsemble, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(ensemble.feature_names):
        raise FeatureCountMismatchError(
            f"expected {len(ensemble.feature_names)} features, got "
            f"{x.shape[1] if x.ndim == 2 else 'non-2D input'}"
        )
    margin = np.full(len(x), ensemble.base_score)
    for tree in ensemble.trees:
        margin += tree.predict(x)
    return margin


def predict_proba(ensemble: TreeEnsemble, x: np.ndarray) -> np.ndarray:
    return _sigmoid(predict_margin(ensemble, x))


def learning_curve(x: np.ndarray, y: np.ndarray, hp: Hyperparams,
                   fractions, folds: int = 5, seed: int = 0,
                   groups=None) -> list[tuple[float, float, float]]:
    """Train/validation macro F1 at growing shares of the training data.

    Folds respect subject grouping when ``groups`` is given. Per fold
    and fraction, a seeded permutation of the fold-training samples is
    truncated to the requested share (extended minimally if a class went
    missing), the model is refit, and both scores recorded. Returns
    ``(fraction, train_f1_mean, validation_f1_mean)`` per fraction.
    """
    from .metrics import macro_f1
    from .tune import grouped_kfold

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    fractions = sorted(fractions)
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")

    if groups is not None:
        fold_of = grouped_kfold(groups, folds, seed)
    else:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(y))
        fold_of = np.empty(len(y), dtype=np.int64)
        for i, chunk in enumerate(np.array_split(perm, folds)):
            fold_of[chunk] = i

    results = []
    for frac in fractions:
        train_scores, val_scores = [], []
        for fold in range(folds):
            tr = np.flatnonzero(fold_of != fold)
            va = np.flatnonzero(fold_of == fold)
            rng = np.random.default_rng((seed, fold))
            perm = tr[rng.permutation(len(tr))]
            take = max(2, math.ceil(frac * len(tr)))
            chosen = list(perm[:take])
            extra = take
            while len(np.unique(y[chosen])) < 2 and extra < len(perm):
                chosen.append(perm[extra])
                extra += 1
            # Canonical order so fraction 1.0 is bit-identical to a plain CV fit.
            sub = np.sort(np.array(chosen))
            model = train(x[sub], y[sub], hp)
            pred_tr = (predict_proba(model, x[sub]) >= 0.5).astype(np.int64)
            pred_va = (predict_proba(model, x[va]) >= 0.5).astype(np.int64)
            train_scores.append(macro_f1(y[sub], pred_tr))
            val_scores.append(macro_f1(y[va], pred_va))
        results.append((frac, float(np.mean(train_scores)), float(np.mean(val_scores))))
    return results
