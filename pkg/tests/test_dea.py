import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exprbench.dea import (
    benjamini_hochberg,
    compare_sets,
    differential_expression,
    wilcoxon_rank_sum,
)
from exprbench.errors import InvalidPValueError, ValidationError
from helpers import make_dataset


def enumeration_p(values_a, values_b):
    """Exact two-sided p by brute enumeration of every rank assignment."""
    pooled = sorted(values_a) + sorted(values_b)
    assert len(set(pooled)) == len(pooled), "oracle is for tie-free data"
    n = len(pooled)
    n_a = len(values_a)
    ranks_of_a = sum(sorted(pooled).index(v) + 1 for v in values_a)
    sums = [sum(combo) for combo in itertools.combinations(range(1, n + 1), n_a)]
    total = len(sums)
    lower = sum(1 for s in sums if s <= ranks_of_a)
    upper = sum(1 for s in sums if s >= ranks_of_a)
    return min(1.0, 2.0 * min(lower, upper) / total)


def stepup_oracle(pvalues):
    """Adjusted p-values from the step-up definition, nothing shared with
    the implementation (explicit index bookkeeping, python loops)."""
    m = len(pvalues)
    indexed = sorted(range(m), key=lambda i: pvalues[i])
    adjusted = [None] * m
    running_min = 1.0
    for pos in range(m - 1, -1, -1):
        i = indexed[pos]
        candidate = pvalues[i] * m / (pos + 1)
        running_min = min(running_min, candidate)
        adjusted[i] = min(1.0, running_min)
    return adjusted


class TestWilcoxon:
    def test_identical_groups_null(self):
        stat, p = wilcoxon_rank_sum([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert p >= 0.99

    def test_canonical_exact_case(self):
        stat, p = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6])
        assert stat == 6.0
        assert p == 0.1

    def test_exact_matches_enumeration_small_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n_a = int(rng.integers(1, 6))
            n_b = int(rng.integers(1, 6))
            pooled = rng.choice(np.arange(100), size=n_a + n_b, replace=False)
            a, b = pooled[:n_a].astype(float), pooled[n_a:].astype(float)
            _, p = wilcoxon_rank_sum(a, b)
            assert p == pytest.approx(enumeration_p(list(a), list(b)), abs=1e-12)

    def test_large_shift_tiny_p(self):
        rng = np.random.default_rng(1)
        a = rng.normal(0.0, 1.0, 200)
        b = rng.normal(1.0, 1.0, 200)
        _, p = wilcoxon_rank_sum(a, b)
        assert p < 1e-10

    def test_all_identical_returns_one(self):
        _, p = wilcoxon_rank_sum([2.0, 2.0], [2.0, 2.0, 2.0])
        assert p == 1.0

    def test_empty_group_rejected(self):
        with pytest.raises(ValidationError):
            wilcoxon_rank_sum([], [1.0])

    def test_symmetric_in_group_order(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=30)
        b = rng.normal(0.5, 1.0, size=40)
        _, p_ab = wilcoxon_rank_sum(a, b)
        _, p_ba = wilcoxon_rank_sum(b, a)
        assert p_ab == pytest.approx(p_ba, abs=1e-12)

    @given(st.lists(st.integers(min_value=-50, max_value=50), min_size=2,
                    max_size=20),
           st.lists(st.integers(min_value=-50, max_value=50), min_size=2,
                    max_size=20))
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_monotone_transform(self, a, b):
        _, p_raw = wilcoxon_rank_sum(a, b)
        transform = lambda v: math.exp(0.1 * v) + 3.0
        _, p_t = wilcoxon_rank_sum([transform(v) for v in a],
                                   [transform(v) for v in b])
        assert p_raw == pytest.approx(p_t, abs=1e-9)


class TestBenjaminiHochberg:
    def test_uniform_ladder(self):
        adjusted = benjamini_hochberg([0.01, 0.02, 0.03, 0.04])
        np.testing.assert_allclose(adjusted, [0.04, 0.04, 0.04, 0.04], atol=1e-15)

    def test_single_p_unchanged(self):
        np.testing.assert_array_equal(benjamini_hochberg([0.37]), [0.37])

    def test_matches_stepup_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.random(int(rng.integers(1, 40)))
            got = benjamini_hochberg(p)
            np.testing.assert_allclose(got, stepup_oracle(list(p)), atol=1e-12)

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
                    min_size=1, max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_properties(self, pvalues):
        adjusted = benjamini_hochberg(pvalues)
        assert np.all(adjusted >= np.asarray(pvalues) - 1e-15)
        assert np.all(adjusted <= 1.0 + 1e-15)
        order = np.argsort(pvalues, kind="stable")
        assert np.all(np.diff(adjusted[order]) >= -1e-12)
        # never more discoveries than unadjusted testing
        assert np.sum(adjusted < 0.05) <= np.sum(np.asarray(pvalues) < 0.05)

    def test_invalid_pvalues_rejected(self):
        with pytest.raises(InvalidPValueError):
            benjamini_hochberg([0.5, 1.2])
        with pytest.raises(InvalidPValueError):
            benjamini_hochberg([0.5, float("nan")])
        with pytest.raises(InvalidPValueError):
            benjamini_hochberg([])


class TestDifferentialExpression:
    def test_planted_genes_detected_with_direction(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=(100, 80))
        values[:10, 40:] += 2.0          # up in Case
        values[10:15, 40:] -= 2.0        # down in Case
        ds = make_dataset(values, ["B"] * 80, ["Control"] * 40 + ["Case"] * 40)
        result = differential_expression(ds, fdr=0.05)
        significant = set(result.significant_genes())
        planted = {f"G{i}" for i in range(15)}
        assert len(significant & planted) >= 14
        assert len(significant - planted) <= 3
        gene_index = {g: i for i, g in enumerate(result.gene_ids)}
        assert all(result.direction[gene_index[f"G{i}"]] == 1 for i in range(10))
        assert all(result.direction[gene_index[f"G{i}"]] == -1 for i in range(10, 15))

    def test_adjusted_ge_raw(self):
        rng = np.random.default_rng(5)
        ds = make_dataset(rng.normal(size=(30, 20)), ["B"] * 20,
                          ["Case"] * 10 + ["Control"] * 10)
        result = differential_expression(ds)
        assert np.all(result.pvalue_adjusted >= result.pvalue - 1e-15)

    def test_csv_roundtrip_headers(self, tmp_path):
        rng = np.random.default_rng(6)
        ds = make_dataset(rng.normal(size=(5, 12)), ["B"] * 12,
                          ["Case"] * 6 + ["Control"] * 6)
        result = differential_expression(ds)
        path = tmp_path / "dea.csv"
        result.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "gene_id,statistic,pvalue,pvalue_adjusted,direction,significant"
        assert len(lines) == 6


class TestCompareSets:
    def test_disjoint(self):
        c = compare_sets({"A", "B"}, {"C"})
        assert c.counts == (2, 0, 1)

    def test_identical(self):
        c = compare_sets({"A", "B"}, {"B", "A"})
        assert c.shap_only == frozenset() and c.dea_only == frozenset()
        assert c.overlap == {"A", "B"}

    def test_partition_is_exact(self):
        rng = np.random.default_rng(7)
        pool = [f"G{i}" for i in range(50)]
        shap = set(rng.choice(pool, 20, replace=False))
        dea = set(rng.choice(pool, 25, replace=False))
        c = compare_sets(shap, dea)
        assert c.shap_only | c.overlap == shap
        assert c.dea_only | c.overlap == dea
        assert not c.shap_only & c.dea_only
        assert not c.shap_only & c.overlap
        assert not c.dea_only & c.overlap
