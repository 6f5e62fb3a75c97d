import numpy as np
import pytest

from exprbench.errors import DegenerateInputError, NonPositiveValueError
from exprbench.preprocess import (
    ScalingParams,
    log2_transform,
    minmax_apply,
    minmax_fit_transform,
    minmax_inverse,
    quantile_normalize,
    quantile_normalize_per_batch,
)
from helpers import make_matrix


def naive_quantile_normalize(values):
    """Sort-average-unsort oracle, written with explicit per-column loops
    and no shared code with the implementation."""
    values = np.asarray(values, dtype=float)
    n_genes, n_samples = values.shape
    sorted_cols = [sorted(values[:, j]) for j in range(n_samples)]
    reference = [sum(col[r] for col in sorted_cols) / n_samples
                 for r in range(n_genes)]
    out = np.empty_like(values)
    for j in range(n_samples):
        order = sorted(range(n_genes), key=lambda g: (values[g, j], g))
        rank_of = {}
        r = 0
        while r < n_genes:
            r_end = r
            while (r_end + 1 < n_genes
                   and values[order[r_end + 1], j] == values[order[r], j]):
                r_end += 1
            mean_ref = sum(reference[r: r_end + 1]) / (r_end - r + 1)
            for pos in range(r, r_end + 1):
                rank_of[order[pos]] = mean_ref
            r = r_end + 1
        for g in range(n_genes):
            out[g, j] = rank_of[g]
    return out


class TestQuantileNormalize:
    def test_two_columns_forced_to_reference(self):
        m = make_matrix([[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])
        out = quantile_normalize(m).values
        np.testing.assert_allclose(out[:, 0], [2.5, 3.5, 4.5])
        np.testing.assert_allclose(out[:, 1], [2.5, 3.5, 4.5])

    def test_identical_columns_unchanged(self):
        col = np.array([3.0, 1.0, 2.0])
        m = make_matrix(np.column_stack([col, col]))
        np.testing.assert_allclose(quantile_normalize(m).values,
                                   m.values, atol=1e-15)

    def test_matches_naive_oracle_and_equal_means(self):
        rng = np.random.default_rng(42)
        m = make_matrix(rng.normal(size=(50, 10)))
        out = quantile_normalize(m).values
        np.testing.assert_allclose(out, naive_quantile_normalize(m.values),
                                   atol=1e-12)
        means = out.mean(axis=0)
        np.testing.assert_allclose(means, means[0], atol=1e-12)

    def test_oracle_agreement_with_ties(self):
        rng = np.random.default_rng(7)
        m = make_matrix(rng.integers(0, 4, size=(20, 5)).astype(float))
        np.testing.assert_allclose(quantile_normalize(m).values,
                                   naive_quantile_normalize(m.values), atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        m = make_matrix(rng.normal(size=(30, 6)))
        once = quantile_normalize(m)
        twice = quantile_normalize(once)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)

    def test_preserves_ranks_when_tie_free(self):
        rng = np.random.default_rng(4)
        m = make_matrix(rng.normal(size=(25, 4)))
        out = quantile_normalize(m).values
        for j in range(4):
            np.testing.assert_array_equal(np.argsort(out[:, j]),
                                          np.argsort(m.values[:, j]))

    def test_single_sample_rejected(self):
        with pytest.raises(DegenerateInputError):
            quantile_normalize(make_matrix([[1.0], [2.0]]))

    def test_per_batch_independent(self):
        rng = np.random.default_rng(5)
        m = make_matrix(rng.normal(size=(10, 6)))
        batches = ["A"] * 3 + ["B"] * 3
        out = quantile_normalize_per_batch(m, batches).values
        sub_a = quantile_normalize(make_matrix(m.values[:, :3])).values
        np.testing.assert_allclose(out[:, :3], sub_a, atol=1e-15)


class TestLog2:
    def test_value_three_offset_one(self):
        out = log2_transform(make_matrix([[3.0]]), offset=1.0)
        assert out.values[0, 0] == 2.0

    def test_value_one_offset_zero(self):
        out = log2_transform(make_matrix([[1.0]]), offset=0.0)
        assert out.values[0, 0] == 0.0

    def test_zero_with_zero_offset_rejected(self):
        with pytest.raises(NonPositiveValueError):
            log2_transform(make_matrix([[0.0]]), offset=0.0)


class TestMinMax:
    def test_endpoints(self):
        out, _ = minmax_fit_transform(make_matrix([[2.0, 4.0, 6.0]]))
        np.testing.assert_allclose(out.values[0], [0.0, 0.5, 1.0])

    def test_constant_gene_maps_to_zero(self):
        out, _ = minmax_fit_transform(make_matrix([[5.0, 5.0, 5.0]]))
        np.testing.assert_array_equal(out.values[0], [0.0, 0.0, 0.0])

    def test_range(self):
        rng = np.random.default_rng(6)
        out, _ = minmax_fit_transform(make_matrix(rng.normal(size=(20, 8))))
        assert out.values.min() >= 0.0 and out.values.max() <= 1.0

    def test_apply_beyond_train_max_exceeds_one(self):
        train = make_matrix([[2.0, 4.0]])
        _, params = minmax_fit_transform(train)
        new = minmax_apply(make_matrix([[6.0, 3.0]]), params)
        assert new.values[0, 0] == 2.0          # (6-2)/(4-2), unclamped

    def test_inverse_recovers_input(self):
        rng = np.random.default_rng(8)
        m = make_matrix(rng.normal(size=(15, 5)))
        scaled, params = minmax_fit_transform(m)
        back = minmax_inverse(scaled, params)
        np.testing.assert_allclose(back.values, m.values, atol=1e-10)

    def test_params_json_roundtrip(self):
        m = make_matrix([[1.0, 2.0], [3.0, 7.0]])
        _, params = minmax_fit_transform(m)
        again = ScalingParams.from_json(params.to_json())
        lookup = dict(zip(again.gene_ids, zip(again.minima, again.maxima)))
        assert lookup["G0"] == (1.0, 2.0)
        assert lookup["G1"] == (3.0, 7.0)
