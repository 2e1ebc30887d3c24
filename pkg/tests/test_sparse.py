import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtnrec.errors import DimensionError, EmptyNeighborhoodError
from gtnrec.gradcheck import check_gradients
from gtnrec.sparse import SparseMatrix, edge_dot, edge_softmax, edge_spmm, softmax_rows, spmm
from gtnrec.tensor import Tensor, mul, reduce_sum

from conftest import random_csr


class TestCSR:
    def test_invariants_hold_after_construction(self, rng):
        s, _ = random_csr(rng, 7, 5)
        assert s.indptr.size == 8 and s.indptr[-1] == s.nnz
        assert np.all(np.diff(s.indptr) >= 0)
        for r in range(s.rows):
            cols = s.indices[s.indptr[r] : s.indptr[r + 1]]
            assert np.all(np.diff(cols) > 0)
            assert np.all((0 <= cols) & (cols < s.cols))

    def test_rejects_unsorted_columns(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            SparseMatrix((1, 3), [0, 2], [2, 1], [1.0, 1.0])

    def test_rejects_bad_indptr(self):
        with pytest.raises(ValueError):
            SparseMatrix((2, 2), [0, 2, 1], [0, 1], [1.0, 1.0])

    def test_rejects_out_of_range_column(self):
        with pytest.raises(ValueError, match="column index"):
            SparseMatrix((1, 2), [0, 1], [2], [1.0])

    def test_adjacent_rows_may_restart_columns(self):
        SparseMatrix((2, 3), [0, 2, 4], [0, 2, 0, 1], np.ones(4))

    def test_from_coo_sums_duplicates(self):
        s = SparseMatrix.from_coo([0, 0, 1], [1, 1, 0], [1.0, 2.0, 5.0], (2, 2))
        np.testing.assert_array_equal(s.to_dense(), [[0, 3], [5, 0]])


class TestSpmm:
    def test_empty_sparse_gives_zeros(self, rng):
        empty = SparseMatrix((4, 3), np.zeros(5), [], [])
        d = Tensor(rng.normal(size=(3, 2)))
        np.testing.assert_array_equal(spmm(empty, d).data, np.zeros((4, 2)))

    def test_identity(self, rng):
        d = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(spmm(SparseMatrix.identity(3), d).data, d.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            spmm(SparseMatrix.identity(3), Tensor(np.ones((2, 2))))

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(1, 50),
        m=st.integers(1, 50),
        k=st.integers(1, 6),
        seed=st.integers(0, 2**31),
    )
    def test_matches_dense_oracle(self, n, m, k, seed):
        rng = np.random.default_rng(seed)
        s, dense = random_csr(rng, n, m, density=0.2)
        d = rng.normal(size=(m, k))
        np.testing.assert_allclose(spmm(s, Tensor(d)).data, dense @ d, rtol=0, atol=1e-12)

    def test_gradient_is_transpose_product(self, rng):
        s, dense = random_csr(rng, 6, 5)
        d = Tensor(rng.uniform(-1, 1, (5, 3)), requires_grad=True)
        probe = Tensor(rng.uniform(-1, 1, (6, 3)))
        assert check_gradients(lambda: reduce_sum(mul(spmm(s, d), probe)), [d]) < 1e-5


def _pattern_with_diagonal(rng, n):
    dense = (rng.random((n, n)) < 0.4).astype(float)
    np.fill_diagonal(dense, 1.0)
    return SparseMatrix.from_dense(dense)


class TestSoftmaxRows:
    def test_singleton_rows_get_weight_one(self):
        mask = SparseMatrix.identity(3)
        out = softmax_rows(Tensor(np.random.default_rng(0).normal(size=(3, 3))), mask)
        np.testing.assert_array_equal(out.data, np.eye(3))

    def test_equal_logits_split_evenly(self):
        mask = SparseMatrix.from_dense([[1, 0, 1]])
        out = softmax_rows(Tensor([[0.7, 9.0, 0.7]]), mask)
        np.testing.assert_array_equal(out.data, [[0.5, 0.0, 0.5]])

    def test_matches_direct_formula(self):
        mask = SparseMatrix.from_dense(np.ones((1, 3)))
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(softmax_rows(Tensor([x]), mask).data[0], expected, rtol=0, atol=1e-12)

    def test_stable_for_large_logits(self):
        mask = SparseMatrix.from_dense(np.ones((1, 2)))
        out = softmax_rows(Tensor([[1000.0, 1000.0]]), mask)
        np.testing.assert_array_equal(out.data, [[0.5, 0.5]])

    def test_empty_row_raises(self):
        mask = SparseMatrix.from_dense([[1, 0], [0, 0]])
        with pytest.raises(EmptyNeighborhoodError, match="row 1"):
            softmax_rows(Tensor(np.zeros((2, 2))), mask)

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 12), seed=st.integers(0, 2**31))
    def test_rows_are_distributions_on_the_mask(self, n, seed):
        rng = np.random.default_rng(seed)
        mask = _pattern_with_diagonal(rng, n)
        out = softmax_rows(Tensor(rng.normal(scale=3, size=(n, n))), mask).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all((out >= 0) & (out <= 1))
        assert np.all(out[mask.to_dense() == 0] == 0)

    def test_gradient(self, rng):
        mask = _pattern_with_diagonal(rng, 6)
        x = Tensor(rng.uniform(-1, 1, (6, 6)), requires_grad=True)
        probe = Tensor(rng.uniform(-1, 1, (6, 6)))
        assert check_gradients(lambda: reduce_sum(mul(softmax_rows(x, mask), probe)), [x]) < 1e-5


class TestEdgeOps:
    def test_edge_softmax_matches_dense_variant(self, rng):
        mask = _pattern_with_diagonal(rng, 7)
        dense_logits = rng.normal(size=(7, 7))
        per_edge = dense_logits[mask.row_ids, mask.indices][:, None]
        sparse_out = edge_softmax(Tensor(per_edge), mask).data[:, 0]
        dense_out = softmax_rows(Tensor(dense_logits), mask).data[mask.row_ids, mask.indices]
        np.testing.assert_allclose(sparse_out, dense_out, rtol=0, atol=1e-15)

    def test_edge_spmm_matches_dense(self, rng):
        mask = _pattern_with_diagonal(rng, 5)
        w = rng.uniform(size=(mask.nnz, 1))
        d = rng.normal(size=(5, 3))
        expected = mask.with_values(w[:, 0]).to_dense() @ d
        np.testing.assert_allclose(edge_spmm(mask, Tensor(w), Tensor(d)).data, expected, atol=1e-12)

    def test_edge_dot_matches_loop(self, rng):
        mask = _pattern_with_diagonal(rng, 5)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        got = edge_dot(mask, Tensor(a), Tensor(b)).data[:, 0]
        expected = [a[i] @ b[j] for i, j in zip(mask.row_ids, mask.indices)]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    @pytest.mark.parametrize("which", ["edge_softmax", "edge_spmm", "edge_dot"])
    def test_gradients(self, rng, which):
        mask = _pattern_with_diagonal(rng, 6)
        vals = Tensor(rng.uniform(-1, 1, (mask.nnz, 1)), requires_grad=True)
        a = Tensor(rng.uniform(-1, 1, (6, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (6, 4)), requires_grad=True)
        if which == "edge_softmax":
            fn, params = (lambda: edge_softmax(vals, mask)), [vals]
        elif which == "edge_spmm":
            fn, params = (lambda: edge_spmm(mask, vals, a)), [vals, a]
        else:
            fn, params = (lambda: edge_dot(mask, a, b)), [a, b]
        probe = Tensor(rng.uniform(-1, 1, fn().shape))
        assert check_gradients(lambda: reduce_sum(mul(fn(), probe)), params) < 1e-5
