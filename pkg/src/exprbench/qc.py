"""Preprocessing quality checks: PCA, batch mixture score, multimodality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data_model import Dataset, ExpressionMatrix
from .errors import (
    DegenerateInputError,
    InsufficientBatchesError,
    InsufficientSamplesError,
    RankDeficiencyError,
)

BIMODALITY_THRESHOLD = 5.0 / 9.0


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray                 # samples x n_components scores
    explained_variance_ratio: tuple[float, ...]
    loadings: np.ndarray                   # genes x n_components


@dataclass(frozen=True)
class MixtureScoreReport:
    per_condition: dict[str, float]
    mean_score: float
    k: int


def pca(matrix: ExpressionMatrix, n_components: int) -> PcaResult:
    """SVD of the per-gene mean-centered matrix, samples as observations.

    Sign convention: the largest-magnitude loading of each component is
    made positive, so scores are reproducible across runs.
    """
    if n_components < 1:
        raise ValueError("n_components must be positive")
    x = matrix.values
    centered = (x - x.mean(axis=1, keepdims=True)).T    # samples x genes
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(centered.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if n_components > rank:
        raise RankDeficiencyError(
            f"requested {n_components} components but numerical rank is {rank}"
        )
    total = float(np.sum(s ** 2))
    scores = u[:, :n_components] * s[:n_components]
    loadings = vt[:n_components].T
    for j in range(n_components):
        pivot = int(np.argmax(np.abs(loadings[:, j])))
        if loadings[pivot, j] < 0:
            loadings[:, j] *= -1
            scores[:, j] *= -1
    ratios = tuple(float(v) for v in (s[:n_components] ** 2) / total)
    return PcaResult(scores, ratios, loadings)


def _knn_cross_batch_fraction(points: np.ndarray, batches: list[str], k: int) -> np.ndarray:
    """Fraction of each point's k nearest neighbors lying in another batch."""
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    neighbor_idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    labels = np.asarray(batches)
    return np.mean(labels[neighbor_idx] != labels[:, None], axis=1)


def mixture_score(matrix: ExpressionMatrix, metadata, k: int = 25) -> MixtureScoreReport:
    """How well batches interleave, per condition, on a 0..1 scale.

    Each sample's cross-batch neighbor fraction is divided by its value
    under perfect mixing and halved, so perfectly interleaved equal
    batches score 0.5 and fully separated batches score 0.0.
    """
    by_sample = {rec.sample_id: rec for rec in metadata}
    records = [by_sample[s] for s in matrix.sample_ids]
    conditions = sorted({rec.condition.value for rec in records})

    per_condition: dict[str, float] = {}
    for cond in conditions:
        cols = [j for j, rec in enumerate(records) if rec.condition.value == cond]
        batches = [records[j].batch for j in cols]
        counts = {b: batches.count(b) for b in set(batches)}
        if len(counts) < 2:
            raise InsufficientBatchesError(
                f"condition {cond!r} has a single batch; mixture undefined"
            )
        n = len(cols)
        if k >= n:
            raise ValueError(f"k={k} must be below the {n} samples of {cond!r}")

        sub = ExpressionMatrix(matrix.gene_ids,
                               [matrix.sample_ids[j] for j in cols],
                               matrix.values[:, cols])
        centered = (sub.values - sub.values.mean(axis=1, keepdims=True)).T
        s = np.linalg.svd(centered, compute_uv=False)
        tol = max(centered.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        rank = max(1, int(np.sum(s > tol)))
        dims = min(50, rank)
        points = pca(sub, dims).components

        observed = _knn_cross_batch_fraction(points, batches, k)
        expected = np.array([(n - counts[b]) / (n - 1) for b in batches])
        score = 0.5 * float(np.mean(observed / expected))
        per_condition[cond] = float(np.clip(score, 0.0, 1.0))

    mean_score = float(np.mean(list(per_condition.values())))
    return MixtureScoreReport(per_condition, mean_score, k)


def multimodality_screen(matrix: ExpressionMatrix) -> list[tuple[str, float]]:
    """Bimodality coefficient per gene, sorted descending.

    Uses bias-corrected skewness and excess kurtosis; values above 5/9
    (the uniform distribution's asymptote) suggest more than one mode.
    Constant genes get 0.0. Returns every gene; callers apply the
    threshold.
    """
    x = matrix.values
    n = x.shape[1]
    if n < 4:
        raise DegenerateInputError("bimodality coefficient needs >= 4 samples")
    constant = x.std(axis=1) == 0
    skew = np.zeros(x.shape[0])
    kurt = np.zeros(x.shape[0])
    if np.any(~constant):
        skew[~constant] = stats.skew(x[~constant], axis=1, bias=False)
        kurt[~constant] = stats.kurtosis(x[~constant], axis=1, fisher=True, bias=False)
    correction = 3.0 * (n - 1) ** 2 / ((n - 2) * (n - 3))
    bc = (skew ** 2 + 1.0) / (kurt + correction)
    bc[constant] = 0.0
    pairs = list(zip(matrix.gene_ids, (float(v) for v in bc)))
    pairs.sort(key=lambda gv: (-gv[1], gv[0]))
    return pairs


def cross_batch_dea_check(dataset: Dataset, fdr: float = 0.05) -> dict[str, int]:
    """Within each condition, count genes that differ between any batch pair.

    A gene counts once per condition if it reaches significance in at
    least one batch-pair comparison (rank-sum test, step-up FDR control
    applied per pair across genes).
    """
    from .dea import benjamini_hochberg, wilcoxon_rank_sum

    records = dataset.metadata_in_matrix_order()
    values = dataset.matrix.values
    out: dict[str, int] = {}
    for cond in sorted({rec.condition.value for rec in records}):
        cols = [j for j, rec in enumerate(records) if rec.condition.value == cond]
        batches = sorted({records[j].batch for j in cols})
        if len(batches) < 2:
            raise InsufficientSamplesError(
                f"condition {cond!r} needs >= 2 batches for the cross-batch check"
            )
        flagged: set[int] = set()
        for a_idx in range(len(batches)):
            for b_idx in range(a_idx + 1, len(batches)):
                cols_a = [j for j in cols if records[j].batch == batches[a_idx]]
                cols_b = [j for j in cols if records[j].batch == batches[b_idx]]
                pvals = np.array([
                    wilcoxon_rank_sum(values[g, cols_a], values[g, cols_b])[1]
                    for g in range(values.shape[0])
                ])
                adjusted = benjamini_hochberg(pvals)
                flagged.update(np.flatnonzero(adjusted < fdr).tolist())
        out[cond] = len(flagged)
    return out
