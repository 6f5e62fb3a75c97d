"""Exact feature attributions for boosted-tree ensembles.

Per tree and sample, attributions are computed with the polynomial-time
path algorithm: a path of unique features is grown (EXTEND) as the tree
is descended down both children, weighting each child by its share of
training cover; when a feature reappears its previous contribution is
removed (UNWIND) before re-extending. At a leaf, each feature on the
path receives the leaf value weighted by the sum of permutation weights
with that feature toggled present/absent. Summed over trees this yields
exact Shapley values under path-dependent feature removal, and satisfies
local accuracy: base value + attributions = margin, per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .boosting import Tree, TreeEnsemble, predict_margin
from .errors import FeatureCountMismatchError, MissingCoverError


@dataclass(frozen=True)
class AttributionMatrix:
    values: np.ndarray                 # samples x features
    base_value: float                  # expected margin under training cover
    feature_names: tuple[str, ...]

    def to_csv(self, path, sample_ids) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(["sample_id", *self.feature_names]) + "\n")
            for sid, row in zip(sample_ids, self.values):
                fh.write(sid + "," + ",".join(repr(float(v)) for v in row) + "\n")

    def summary_json(self) -> str:
        ranking = shap_feature_ranking(self)
        return json.dumps({
            "base_value": self.base_value,
            "ranking": [{"gene": g, "importance": v} for g, v in ranking],
        }, sort_keys=True, indent=2)


def _extend(path, zero_fraction, one_fraction, feature):
    l = len(path)
    out = [row[:] for row in path]
    out.append([feature, zero_fraction, one_fraction, 1.0 if l == 0 else 0.0])
    for i in range(l - 1, -1, -1):
        out[i + 1][3] += one_fraction * out[i][3] * (i + 1) / (l + 1)
        out[i][3] = zero_fraction * out[i][3] * (l - i) / (l + 1)
    return out


def _unwind(path, index):
    l = len(path) - 1
    zero_fraction, one_fraction = path[index][1], path[index][2]
    out = [row[:] for row in path]
    n = out[l][3]
    for i in range(l - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = out[i][3]
            out[i][3] = n * (l + 1) / ((i + 1) * one_fraction)
            n = tmp - out[i][3] * zero_fraction * (l - i) / (l + 1)
        else:
            out[i][3] = out[i][3] * (l + 1) / (zero_fraction * (l - i))
    for i in range(index, l):
        out[i][0], out[i][1], out[i][2] = out[i + 1][0], out[i + 1][1], out[i + 1][2]
    return out[:l]


def _unwound_sum(path, index):
    l = len(path) - 1
    zero_fraction, one_fraction = path[index][1], path[index][2]
    n = path[l][3]
    total = 0.0
    if one_fraction != 0.0:
        for i in range(l - 1, -1, -1):
            tmp = n / ((i + 1) * one_fraction)
            total += tmp
            n = path[i][3] - tmp * zero_fraction * (l - i)
    else:
        for i in range(l - 1, -1, -1):
            total += path[i][3] / (zero_fraction * (l - i))
    return total * (l + 1)


def _recurse(tree: Tree, node: int, x: np.ndarray, phi: np.ndarray,
             path, parent_zero: float, parent_one: float, parent_feature: int):
    path = _extend(path, parent_zero, parent_one, parent_feature)
    feat = tree.feature[node]
    if feat < 0:
        leaf_value = tree.weight[node]
        for i in range(1, len(path)):
            w = _unwound_sum(path, i)
            phi[path[i][0]] += w * (path[i][2] - path[i][1]) * leaf_value
        return

    left, right = int(tree.left[node]), int(tree.right[node])
    hot, cold = (left, right) if x[feat] < tree.threshold[node] else (right, left)
    hot_zero = tree.cover[hot] / tree.cover[node]
    cold_zero = tree.cover[cold] / tree.cover[node]

    incoming_zero = incoming_one = 1.0
    for k in range(len(path)):
        if path[k][0] == feat:
            incoming_zero, incoming_one = path[k][1], path[k][2]
            path = _unwind(path, k)
            break
    _recurse(tree, hot, x, phi, path, hot_zero * incoming_zero, incoming_one, feat)
    _recurse(tree, cold, x, phi, path, cold_zero * incoming_zero, 0.0, feat)


def tree_shap(ensemble: TreeEnsemble, x: np.ndarray) -> AttributionMatrix:
    """Attribute each sample's margin across features, exactly.

    Requires per-node cover (training hessian mass) on every tree; models
    deserialized without it cannot be explained.
    """
    x = np.asarray(x, dtype=np.float64)
    n_features = len(ensemble.feature_names)
    if x.ndim != 2 or x.shape[1] != n_features:
        raise FeatureCountMismatchError(
            f"expected {n_features} features, got {x.shape}"
        )
    for t, tree in enumerate(ensemble.trees):
        if len(tree.cover) != tree.n_nodes or (tree.n_nodes and tree.cover[0] <= 0):
            raise MissingCoverError(f"tree {t} lacks cover statistics")

    base = ensemble.base_score + sum(t.expected_value() for t in ensemble.trees)
    values = np.zeros((len(x), n_features))
    for i in range(len(x)):
        phi = np.zeros(n_features)
        for tree in ensemble.trees:
            if tree.feature[0] < 0:      # single-leaf tree: nothing to attribute
                continue
            _recurse(tree, 0, x[i], phi, [], 1.0, 1.0, -1)
        values[i] = phi
    return AttributionMatrix(values, float(base), ensemble.feature_names)


def shap_feature_ranking(attr: AttributionMatrix) -> list[tuple[str, float]]:
    """Mean |attribution| per feature, descending; exact zeros dropped,
    ties ordered lexicographically."""
    importance = np.mean(np.abs(attr.values), axis=0)
    pairs = [(name, float(v)) for name, v in zip(attr.feature_names, importance)
             if v != 0.0]
    pairs.sort(key=lambda gv: (-gv[1], gv[0]))
    return pairs


def local_accuracy_gap(ensemble: TreeEnsemble, x: np.ndarray,
                       attr: AttributionMatrix) -> float:
    """Max |base + sum(attributions) - margin| over samples; should sit at
    floating-point noise for any trained model."""
    margins = predict_margin(ensemble, x)
    reconstructed = attr.base_value + attr.values.sum(axis=1)
    return float(np.max(np.abs(reconstructed - margins)))
