"""Collapse correlated-gene clusters to their highest-variance member."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data_model import ExpressionMatrix
from .errors import UnknownRepresentativeError, ValidationError


@dataclass(frozen=True)
class ClusterMap:
    """Disjoint clusters of correlated genes, keyed by representative.

    Every clustered gene appears in exactly one member list, and the
    representative is always among its own members.
    """

    clusters: tuple[tuple[str, tuple[str, ...]], ...]
    threshold: float

    def __post_init__(self):
        seen: set[str] = set()
        for rep, members in self.clusters:
            if rep not in members:
                raise ValidationError(f"representative {rep!r} not in its member list")
            for g in members:
                if g in seen:
                    raise ValidationError(f"gene {g!r} assigned to two clusters")
                seen.add(g)

    def representative_of(self) -> dict[str, str]:
        return {g: rep for rep, members in self.clusters for g in members}

    def members_of(self) -> dict[str, tuple[str, ...]]:
        return {rep: members for rep, members in self.clusters}

    def to_json(self, include_singletons: bool = True) -> str:
        entries = [
            {"rep": rep, "members": list(members)}
            for rep, members in self.clusters
            if include_singletons or len(members) > 1
        ]
        return json.dumps({"threshold": self.threshold, "clusters": entries},
                          sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClusterMap":
        payload = json.loads(text)
        clusters = tuple(
            (e["rep"], tuple(e["members"])) for e in payload["clusters"]
        )
        return cls(clusters, float(payload["threshold"]))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def decluster(matrix: ExpressionMatrix, r_threshold: float = 0.9,
              absolute: bool = True) -> tuple[ExpressionMatrix, ClusterMap]:
    """Drop all but one gene from each correlated cluster.

    Genes are linked when their Pearson correlation exceeds
    ``r_threshold`` (absolute value by default, so anti-correlated
    duplicates collapse too); clusters are the connected components of
    that graph, represented by their highest-variance member (ties break
    to the lexicographically smaller id). Constant genes correlate with
    nothing and stay as singletons.
    """
    if not 0.0 < r_threshold < 1.0:
        raise ValueError("r_threshold must lie in (0, 1)")
    x = matrix.values
    n_genes = x.shape[0]
    variances = x.var(axis=1, ddof=1) if x.shape[1] > 1 else np.zeros(n_genes)

    uf = _UnionFind(n_genes)
    if n_genes > 1:
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.corrcoef(x)
        corr = np.nan_to_num(corr, nan=0.0)
        strength = np.abs(corr) if absolute else corr
        np.fill_diagonal(strength, 0.0)
        for a, b in zip(*np.nonzero(strength > r_threshold)):
            if a < b:
                uf.union(int(a), int(b))

    components: dict[int, list[int]] = {}
    for g in range(n_genes):
        components.setdefault(uf.find(g), []).append(g)

    clusters = []
    for rows in components.values():
        members = sorted(matrix.gene_ids[g] for g in rows)
        # Variance ties break to the lexicographically smallest gene id.
        top_var = max(variances[g] for g in rows)
        tied = sorted(matrix.gene_ids[g] for g in rows if variances[g] == top_var)
        clusters.append((tied[0], tuple(members)))
    clusters.sort(key=lambda c: c[0])
    cmap = ClusterMap(tuple(clusters), r_threshold)

    reps = {rep for rep, _ in clusters}
    kept = [g for g in matrix.gene_ids if g in reps]
    return matrix.select_genes(kept), cmap


def expand_importance(scores: dict[str, float], cmap: ClusterMap) -> dict[str, float]:
    """Propagate each representative's score to all its cluster members."""
    members_of = cmap.members_of()
    unknown = sorted(set(scores) - set(members_of))
    if unknown:
        raise UnknownRepresentativeError(
            f"scores given for non-representative genes: {unknown[:5]}"
        )
    out: dict[str, float] = {}
    for rep, score in scores.items():
        for gene in members_of[rep]:
            out[gene] = score
    return out
