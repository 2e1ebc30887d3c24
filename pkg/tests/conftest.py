import numpy as np
import pytest

from gtnrec.graph import RatingRecord, TrustRecord
from gtnrec.sparse import SparseMatrix


def random_csr(rng, rows, cols, density=0.2):
    dense = np.where(rng.random((rows, cols)) < density, rng.uniform(-1, 1, (rows, cols)), 0.0)
    return SparseMatrix.from_dense(dense), dense


def random_symmetric_adjacency(rng, n, p=0.3):
    """Dense 0/1 symmetric matrix with zero diagonal."""
    upper = np.triu(rng.random((n, n)) < p, k=1)
    return (upper | upper.T).astype(float)


def self_loop_mask(adjacency_dense):
    return SparseMatrix.from_dense(adjacency_dense + np.eye(len(adjacency_dense)))


def toy_ratings(rng, n_users, n_items, n, seed_prefix=""):
    seen = {}
    while len(seen) < n:
        u, i = int(rng.integers(n_users)), int(rng.integers(n_items))
        seen[(u, i)] = float(rng.integers(1, 6))
    return [RatingRecord(f"{seed_prefix}u{u}", f"{seed_prefix}i{i}", r) for (u, i), r in seen.items()]


def toy_trust(rng, n_users, n):
    out = []
    while len(out) < n:
        a, b = rng.integers(n_users, size=2)
        if a != b:
            out.append(TrustRecord(f"u{a}", f"u{b}"))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
