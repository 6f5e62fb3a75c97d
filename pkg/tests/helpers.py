"""Shared test fixtures and independent oracles.

The oracles here deliberately re-derive results from definitions
(exhaustive subset enumeration, naive loops) rather than reusing any
library code path they are checking.
"""

import math

import numpy as np

from exprbench.boosting import Hyperparams, Tree, TreeEnsemble
from exprbench.data_model import Condition, Dataset, ExpressionMatrix, SampleMetadata


def make_matrix(values, gene_ids=None, sample_ids=None) -> ExpressionMatrix:
    values = np.asarray(values, dtype=np.float64)
    genes = gene_ids or tuple(f"G{i}" for i in range(values.shape[0]))
    samples = sample_ids or tuple(f"S{j}" for j in range(values.shape[1]))
    return ExpressionMatrix(tuple(genes), tuple(samples), values)


def make_dataset(values, batches, conditions, subjects=None) -> Dataset:
    matrix = make_matrix(values)
    subjects = subjects or [f"P{j}" for j in range(matrix.n_samples)]
    metadata = [
        SampleMetadata(
            sample_id=matrix.sample_ids[j],
            subject_id=subjects[j],
            batch=batches[j],
            condition=Condition.CASE if conditions[j] in ("Case", 1) else Condition.CONTROL,
        )
        for j in range(matrix.n_samples)
    ]
    return Dataset(matrix, metadata)


# --- brute-force Shapley oracle ---------------------------------------------

def tree_conditional_expectation(tree: Tree, node: int, x, subset) -> float:
    """Descend following x on features in ``subset``; average children by
    cover share otherwise. Definitional, recursive, unoptimized."""
    f = tree.feature[node]
    if f < 0:
        return float(tree.weight[node])
    left, right = int(tree.left[node]), int(tree.right[node])
    if f in subset:
        nxt = left if x[f] < tree.threshold[node] else right
        return tree_conditional_expectation(tree, nxt, x, subset)
    w_left = tree.cover[left] / tree.cover[node]
    w_right = tree.cover[right] / tree.cover[node]
    return (w_left * tree_conditional_expectation(tree, left, x, subset)
            + w_right * tree_conditional_expectation(tree, right, x, subset))


def brute_force_shap(ensemble: TreeEnsemble, x) -> np.ndarray:
    """Exact Shapley values by enumerating every feature subset.

    Per tree only its own used features matter (absent features never
    change the conditional expectation), which keeps 2^M tractable.
    """
    phi = np.zeros(len(ensemble.feature_names))
    for tree in ensemble.trees:
        used = sorted({int(f) for f in tree.feature if f >= 0})
        u = len(used)
        if u == 0:
            continue
        values = {}
        for mask in range(1 << u):
            subset = frozenset(used[b] for b in range(u) if mask >> b & 1)
            values[mask] = tree_conditional_expectation(tree, 0, x, subset)
        fact = [math.factorial(i) for i in range(u + 1)]
        for b, f in enumerate(used):
            bit = 1 << b
            for mask in range(1 << u):
                if mask & bit:
                    continue
                s = bin(mask).count("1")
                weight = fact[s] * fact[u - s - 1] / fact[u]
                phi[f] += weight * (values[mask | bit] - values[mask])
    return phi


# --- random tree construction ------------------------------------------------

def random_tree(rng: np.random.Generator, n_features: int, max_depth: int) -> Tree:
    """A structurally valid random tree: random splits and leaf weights,
    positive leaf covers, internal covers summing their children."""
    feature, threshold, left, right, weight, cover = [], [], [], [], [], []

    def alloc():
        for arr, fill in ((feature, -1), (threshold, 0.0), (left, -1),
                          (right, -1), (weight, 0.0), (cover, 0.0)):
            arr.append(fill)
        return len(feature) - 1

    def build(depth):
        node = alloc()
        if depth >= max_depth or rng.random() < 0.3:
            weight[node] = float(rng.normal())
            cover[node] = float(rng.uniform(0.5, 5.0))
            return node
        feature[node] = int(rng.integers(n_features))
        threshold[node] = float(rng.random())
        left[node] = build(depth + 1)
        right[node] = build(depth + 1)
        cover[node] = cover[left[node]] + cover[right[node]]
        return node

    build(0)
    n = len(feature)
    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        weight=np.array(weight, dtype=np.float64),
        cover=np.array(cover, dtype=np.float64),
        default_left=np.ones(n, dtype=bool),
    )


def random_ensemble(rng: np.random.Generator, n_features: int, max_depth: int,
                    n_trees: int) -> TreeEnsemble:
    trees = [random_tree(rng, n_features, max_depth) for _ in range(n_trees)]
    return TreeEnsemble(
        trees=trees,
        base_score=float(rng.normal()),
        hp=Hyperparams(),
        feature_names=tuple(f"f{i}" for i in range(n_features)),
    )
