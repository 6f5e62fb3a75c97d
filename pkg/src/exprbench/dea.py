"""Rank-sum differential expression with step-up FDR control."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data_model import Dataset
from .errors import InvalidPValueError, ValidationError

EXACT_MAX_N = 12


def _exact_two_sided_p(rank_sum: float, n_a: int, n_b: int) -> float:
    """Exact two-sided tail of the rank-sum null over all C(N, n_a)
    assignments of ranks 1..N (tie-free inputs only).

    Counts subsets by a subset-sum recurrence rather than enumeration.
    """
    n = n_a + n_b
    max_sum = n_a * n
    counts = np.zeros((n_a + 1, max_sum + 1), dtype=np.float64)
    counts[0, 0] = 1.0
    for value in range(1, n + 1):
        for k in range(min(value, n_a), 0, -1):
            counts[k, value:] += counts[k - 1, : max_sum + 1 - value]
    dist = counts[n_a]
    total = dist.sum()
    w = int(round(rank_sum))
    lower = dist[: w + 1].sum()
    upper = dist[w:].sum()
    return min(1.0, 2.0 * min(lower, upper) / total)


def wilcoxon_rank_sum(group_a, group_b) -> tuple[float, float]:
    """Two-sided rank-sum test; returns (rank sum of group A, p).

    Ties get midranks. Small tie-free inputs (N <= 12) use the exact null
    distribution; otherwise a normal approximation with tie-corrected
    variance and 0.5 continuity correction. If every pooled value is
    identical the test is uninformative and p = 1.0 by convention.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValidationError("both groups must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled, method="average")
    w = float(ranks[: a.size].sum())

    _, tie_counts = np.unique(pooled, return_counts=True)
    if tie_counts.size == 1:
        return w, 1.0

    n_a, n_b = a.size, b.size
    n = n_a + n_b
    if n <= EXACT_MAX_N and np.all(tie_counts == 1):
        return w, _exact_two_sided_p(w, n_a, n_b)

    mu = n_a * (n + 1) / 2.0
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return w, 1.0
    shift = w - mu
    z = (shift - math.copysign(0.5, shift)) / math.sqrt(var) if shift != 0 else 0.0
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return w, min(1.0, p)


def benjamini_hochberg(pvalues) -> np.ndarray:
    """Step-up adjusted p-values: adj_(i) = min_{j>=i} p_(j) * m / j, capped
    at 1, returned in input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidPValueError("need a non-empty 1-D p-value vector")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidPValueError("p-values must be finite and within [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(adjusted_sorted, 1.0)
    return adjusted


@dataclass(frozen=True)
class DeaResult:
    gene_ids: tuple[str, ...]
    statistic: np.ndarray
    pvalue: np.ndarray
    pvalue_adjusted: np.ndarray
    direction: np.ndarray        # sign of median(case) - median(control)
    significant: np.ndarray
    fdr: float

    def significant_genes(self) -> list[str]:
        return [g for g, s in zip(self.gene_ids, self.significant) if s]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("gene_id,statistic,pvalue,pvalue_adjusted,direction,significant\n")
            for i, g in enumerate(self.gene_ids):
                fh.write(
                    f"{g},{self.statistic[i]!r},{self.pvalue[i]!r},"
                    f"{self.pvalue_adjusted[i]!r},{int(self.direction[i])},"
                    f"{'true' if self.significant[i] else 'false'}\n"
                )


def differential_expression(dataset: Dataset, fdr: float = 0.05) -> DeaResult:
    """Per-gene rank-sum test of Case vs Control with FDR adjustment."""
    labels = dataset.labels()
    case_cols = np.flatnonzero(labels == 1)
    control_cols = np.flatnonzero(labels == 0)
    if case_cols.size == 0 or control_cols.size == 0:
        raise ValidationError("need samples from both conditions")

    values = dataset.matrix.values
    stats = np.empty(values.shape[0])
    pvals = np.empty(values.shape[0])
    direction = np.empty(values.shape[0])
    for g in range(values.shape[0]):
        case_vals = values[g, case_cols]
        control_vals = values[g, control_cols]
        stats[g], pvals[g] = wilcoxon_rank_sum(case_vals, control_vals)
        direction[g] = np.sign(np.median(case_vals) - np.median(control_vals))
    adjusted = benjamini_hochberg(pvals)
    return DeaResult(
        gene_ids=dataset.matrix.gene_ids,
        statistic=np.array([float(s) for s in stats]),
        pvalue=pvals,
        pvalue_adjusted=adjusted,
        direction=direction,
        significant=adjusted < fdr,
        fdr=fdr,
    )


@dataclass(frozen=True)
class SetComparison:
    shap_only: frozenset[str]
    overlap: frozenset[str]
    dea_only: frozenset[str]

    @property
    def counts(self) -> tuple[int, int, int]:
        return (len(self.shap_only), len(self.overlap), len(self.dea_only))

    def to_json(self) -> str:
        shap_n, overlap_n, dea_n = self.counts
        return json.dumps({
            "counts": {"shap_only": shap_n, "overlap": overlap_n, "dea_only": dea_n},
            "shap_only": sorted(self.shap_only),
            "overlap": sorted(self.overlap),
            "dea_only": sorted(self.dea_only),
        }, sort_keys=True, indent=2)


def compare_sets(shap_genes, dea_genes) -> SetComparison:
    """Partition two gene collections into the three Venn regions."""
    shap_set = frozenset(shap_genes)
    dea_set = frozenset(dea_genes)
    return SetComparison(
        shap_only=shap_set - dea_set,
        overlap=shap_set & dea_set,
        dea_only=dea_set - shap_set,
    )
