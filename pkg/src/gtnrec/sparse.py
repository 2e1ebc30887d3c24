"""CSR sparse matrices and the sparse operations used by graph layers.

:class:`SparseMatrix` owns its CSR arrays and checks their invariants; the
actual products are delegated to ``scipy.sparse``.  Row-wise masked softmax
works directly on the CSR layout: one value per stored entry, grouped by row.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, EmptyNeighborhoodError
from .tensor import Tensor, _op

__all__ = [
    "SparseMatrix",
    "spmm",
    "edge_spmm",
    "edge_dot",
    "edge_softmax",
    "softmax_rows",
]


class SparseMatrix:
    """Compressed sparse row matrix of float64 values.

    Column indices are strictly increasing within each row; ``indptr`` has
    length ``rows + 1`` and ends at ``nnz``.
    """

    __slots__ = ("shape", "indptr", "indices", "values", "_csr", "_row_ids")

    def __init__(self, shape, indptr, indices, values, check: bool = True):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        for arr in (self.indptr, self.indices, self.values):
            arr.flags.writeable = False
        self._csr: Optional[sp.csr_matrix] = None
        self._row_ids: Optional[np.ndarray] = None
        if check:
            self._validate()

    def _validate(self) -> None:
        rows, cols = self.shape
        ip, ix = self.indptr, self.indices
        if ip.shape != (rows + 1,) or ip[0] != 0:
            raise ValueError("indptr must have length rows+1 and start at 0")
        if np.any(np.diff(ip) < 0):
            raise ValueError("indptr must be nondecreasing")
        if ip[-1] != ix.size or ix.size != self.values.size:
            raise ValueError("indptr[-1], len(indices) and len(values) must all equal nnz")
        if ix.size and (ix.min() < 0 or ix.max() >= cols):
            raise ValueError(f"column index outside [0, {cols})")
        if ix.size > 1:
            same_row = self.row_ids[1:] == self.row_ids[:-1]
            if np.any((np.diff(ix) <= 0) & same_row):
                raise ValueError("column indices must be strictly increasing within a row")

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        out = cls(m.shape, m.indptr, m.indices, m.data, check=False)
        out._csr = m
        return out

    @classmethod
    def from_coo(cls, rows, cols, values, shape) -> "SparseMatrix":
        """Build from triplets; duplicate coordinates are summed."""
        m = sp.coo_matrix(
            (np.asarray(values, dtype=np.float64), (np.asarray(rows), np.asarray(cols))),
            shape=shape,
        )
        return cls.from_scipy(m.tocsr())

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls((n, n), np.arange(n + 1), np.arange(n), np.ones(n), check=False)

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``indices``."""
        if self._row_ids is None:
            self._row_ids = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        return self._row_ids

    def scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.values, self.indices, self.indptr), shape=self.shape)
        return self._csr

    def with_values(self, values) -> "SparseMatrix":
        """Same sparsity pattern, new stored values."""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != self.nnz:
            raise DimensionError(f"need {self.nnz} values, got {values.size}")
        out = SparseMatrix(self.shape, self.indptr, self.indices, values, check=False)
        out._row_ids = self._row_ids
        return out

    def to_dense(self) -> np.ndarray:
        return self.scipy().toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.scipy().T.tocsr())

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.scipy().sum(axis=1)).ravel()

    def empty_rows(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self.indptr) == 0)

    def __repr__(self) -> str:
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def spmm(s: SparseMatrix, d: Tensor) -> Tensor:
    """``s @ d`` with ``s`` constant; the gradient with respect to ``d`` is ``s.T @ grad``."""
    if s.cols != d.rows:
        raise DimensionError(f"spmm: {s.shape} x {d.shape}")
    m = s.scipy()
    return _op(np.asarray(m @ d.data), (d,), lambda g: (np.asarray(m.T @ g),))


def _check_pattern_values(pattern: SparseMatrix, values: Tensor) -> None:
    if values.shape != (pattern.nnz, 1):
        raise DimensionError(f"edge values must be ({pattern.nnz}, 1), got {values.shape}")


def edge_spmm(pattern: SparseMatrix, values: Tensor, d: Tensor) -> Tensor:
    """Sparse product where the stored entries are themselves a differentiable column.

    ``values`` is ``nnz x 1`` aligned with the CSR order of ``pattern``.
    """
    _check_pattern_values(pattern, values)
    if pattern.cols != d.rows:
        raise DimensionError(f"edge_spmm: {pattern.shape} x {d.shape}")
    m = pattern.with_values(values.data[:, 0]).scipy()
    rows, cols = pattern.row_ids, pattern.indices
    dd = d.data

    def rule(g):
        g_vals = np.einsum("ij,ij->i", g[rows], dd[cols])[:, None]
        return g_vals, np.asarray(m.T @ g)

    return _op(np.asarray(m @ dd), (values, d), rule)


def edge_dot(pattern: SparseMatrix, a: Tensor, b: Tensor) -> Tensor:
    """``a[i] . b[j]`` for every stored entry ``(i, j)`` of ``pattern``, as ``nnz x 1``."""
    if a.rows != pattern.rows or b.rows != pattern.cols or a.cols != b.cols:
        raise DimensionError(f"edge_dot: pattern {pattern.shape}, operands {a.shape}, {b.shape}")
    rows, cols = pattern.row_ids, pattern.indices
    ad, bd = a.data, b.data
    out = np.einsum("ij,ij->i", ad[rows], bd[cols])[:, None]

    def rule(g):
        weighted = pattern.with_values(g[:, 0]).scipy()
        return np.asarray(weighted @ bd), np.asarray(weighted.T @ ad)

    return _op(out, (a, b), rule)


def _segment_softmax(x: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    starts = indptr[:-1]
    counts = np.diff(indptr)
    row_max = np.maximum.reduceat(x, starts)
    e = np.exp(x - np.repeat(row_max, counts))
    return e / np.repeat(np.add.reduceat(e, starts), counts)


def _softmax_rule(y: np.ndarray, indptr: np.ndarray):
    starts = indptr[:-1]
    counts = np.diff(indptr)

    def rule(g: np.ndarray) -> np.ndarray:
        dot = np.add.reduceat(g * y, starts)
        return y * (g - np.repeat(dot, counts))

    return rule


def _require_nonempty(pattern: SparseMatrix) -> None:
    empty = pattern.empty_rows()
    if empty.size:
        raise EmptyNeighborhoodError(
            f"{empty.size} row(s) have no active entries (first: row {int(empty[0])}); "
            "every node needs a neighbor or a self-loop"
        )


def edge_softmax(values: Tensor, pattern: SparseMatrix) -> Tensor:
    """Softmax of an ``nnz x 1`` logit column within each row of ``pattern``."""
    _check_pattern_values(pattern, values)
    _require_nonempty(pattern)
    y = _segment_softmax(values.data[:, 0], pattern.indptr)
    inner = _softmax_rule(y, pattern.indptr)
    return _op(y[:, None], (values,), lambda g: (inner(g[:, 0])[:, None],))


def softmax_rows(t: Tensor, mask: SparseMatrix) -> Tensor:
    """Row softmax of a dense tensor restricted to the active entries of ``mask``.

    Inactive entries come out exactly 0.  Stabilized by subtracting the row
    maximum over active entries.
    """
    if t.shape != mask.shape:
        raise DimensionError(f"softmax_rows: tensor {t.shape} vs mask {mask.shape}")
    _require_nonempty(mask)
    rows, cols = mask.row_ids, mask.indices
    y = _segment_softmax(t.data[rows, cols], mask.indptr)
    inner = _softmax_rule(y, mask.indptr)
    out = np.zeros(t.shape)
    out[rows, cols] = y

    def rule(g):
        dg = np.zeros(g.shape)
        dg[rows, cols] = inner(g[rows, cols])
        return (dg,)

    return _op(out, (t,), rule)
