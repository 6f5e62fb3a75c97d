"""Gene-level normalization: quantile normalization, log2, min-max scaling."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data_model import ExpressionMatrix
from .errors import DegenerateInputError, NonPositiveValueError, ValidationError


def quantile_normalize(matrix: ExpressionMatrix) -> ExpressionMatrix:
    """Force every sample (column) to share one value distribution.

    The reference distribution is the mean of the order statistics across
    columns. Within a column, tied values all receive the mean of the
    reference values spanning their tied ranks, so ranks are preserved
    and ties stay tied.
    """
    x = matrix.values
    if x.shape[1] < 2:
        raise DegenerateInputError("quantile normalization needs >= 2 samples")

    order = np.argsort(x, axis=0, kind="stable")
    reference = np.take_along_axis(x, order, axis=0).mean(axis=1)

    out = np.empty_like(x)
    for j in range(x.shape[1]):
        col_order = order[:, j]
        sorted_col = x[col_order, j]
        # Runs of equal values share the mean reference over the run.
        boundaries = np.flatnonzero(sorted_col[1:] != sorted_col[:-1]) + 1
        starts = np.concatenate(([0], boundaries))
        ends = np.concatenate((boundaries, [len(sorted_col)]))
        assigned = np.empty_like(sorted_col)
        for s, e in zip(starts, ends):
            assigned[s:e] = reference[s:e].mean()
        out[col_order, j] = assigned
    return matrix.with_values(out)


def quantile_normalize_per_batch(matrix: ExpressionMatrix, batches) -> ExpressionMatrix:
    """Quantile-normalize each batch's columns independently."""
    batches = list(batches)
    if len(batches) != matrix.n_samples:
        raise ValidationError("batch vector length must equal sample count")
    out = np.array(matrix.values)
    for batch in dict.fromkeys(batches):
        cols = [j for j, b in enumerate(batches) if b == batch]
        sub = ExpressionMatrix(matrix.gene_ids, [matrix.sample_ids[j] for j in cols],
                               matrix.values[:, cols])
        out[:, cols] = quantile_normalize(sub).values
    return matrix.with_values(out)


def log2_transform(matrix: ExpressionMatrix, offset: float = 1.0) -> ExpressionMatrix:
    """Elementwise log2(value + offset); every shifted value must be > 0."""
    if offset < 0:
        raise ValueError("offset must be >= 0")
    shifted = matrix.values + offset
    if np.any(shifted <= 0):
        bad = np.argwhere(shifted <= 0)[0]
        raise NonPositiveValueError(
            f"value {matrix.values[bad[0], bad[1]]} + offset {offset} is not positive "
            f"(gene {matrix.gene_ids[bad[0]]!r}, sample {matrix.sample_ids[bad[1]]!r})"
        )
    return matrix.with_values(np.log2(shifted))


@dataclass(frozen=True)
class ScalingParams:
    """Per-gene min/max recorded at fit time, so train-derived scaling can
    be replayed on held-out data."""

    gene_ids: tuple[str, ...]
    minima: np.ndarray
    maxima: np.ndarray

    def __post_init__(self):
        if np.any(self.maxima < self.minima):
            raise ValidationError("per-gene max must be >= min")

    def to_json(self) -> str:
        payload = {
            g: {"min": float(lo), "max": float(hi)}
            for g, lo, hi in zip(self.gene_ids, self.minima, self.maxima)
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScalingParams":
        payload = json.loads(text)
        genes = tuple(sorted(payload))
        lo = np.array([payload[g]["min"] for g in genes])
        hi = np.array([payload[g]["max"] for g in genes])
        return cls(genes, lo, hi)


def minmax_fit_transform(matrix: ExpressionMatrix) -> tuple[ExpressionMatrix, ScalingParams]:
    """Scale each gene to [0, 1]; constant genes map to 0.0."""
    lo = matrix.values.min(axis=1)
    hi = matrix.values.max(axis=1)
    params = ScalingParams(matrix.gene_ids, lo, hi)
    return minmax_apply(matrix, params, _fitted=True), params


def minmax_apply(matrix: ExpressionMatrix, params: ScalingParams,
                 _fitted: bool = False) -> ExpressionMatrix:
    """Apply stored scaling. Values outside the fitted range land outside
    [0, 1]; no clamping."""
    if not _fitted:
        index = {g: i for i, g in enumerate(params.gene_ids)}
        rows = [index[g] for g in matrix.gene_ids]
        lo, hi = params.minima[rows], params.maxima[rows]
    else:
        lo, hi = params.minima, params.maxima
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = (matrix.values - lo[:, None]) / safe[:, None]
    scaled[span == 0, :] = 0.0
    return matrix.with_values(scaled)


def minmax_inverse(matrix: ExpressionMatrix, params: ScalingParams) -> ExpressionMatrix:
    index = {g: i for i, g in enumerate(params.gene_ids)}
    rows = [index[g] for g in matrix.gene_ids]
    lo, hi = params.minima[rows], params.maxima[rows]
    return matrix.with_values(matrix.values * (hi - lo)[:, None] + lo[:, None])
