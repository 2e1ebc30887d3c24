"""Rating/trust ingestion and the homogeneous user+item graph.

Users take internal ids ``[0, n_users)`` and items ``[n_users, N)``, both in
first-seen order.  Every rating and every trust record becomes an undirected
unit-weight edge; self-loops are added only by :func:`normalize_adjacency`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, ParseError, RangeError, TooSmallError
from .sparse import SparseMatrix
from .tensor import Tensor

logger = logging.getLogger(__name__)

RATING_MIN, RATING_MAX = 1.0, 5.0
SPLITS_FORMAT = "gtnrec-splits"
SPLITS_VERSION = 1


@dataclass(frozen=True)
class RatingRecord:
    user: str
    item: str
    rating: float


@dataclass(frozen=True)
class TrustRecord:
    trustor: str
    trustee: str


def _open_csv(path, header: Sequence[str]):
    path = Path(path)
    fh = path.open(newline="", encoding="utf-8")
    reader = csv.reader(fh)
    first = next(reader, None)
    if first is None or [c.strip() for c in first] != list(header):
        fh.close()
        raise ParseError(f"{path}:1: expected header {','.join(header)!r}, got {first!r}")
    return fh, reader


def load_ratings(path) -> list[RatingRecord]:
    """Parse a ``user,item,rating`` CSV.

    Repeated ``(user, item)`` pairs keep the position of their first
    occurrence and the rating of their last; one warning reports how many
    were collapsed.
    """
    fh, reader = _open_csv(path, ("user", "item", "rating"))
    seen: dict[tuple[str, str], float] = {}
    duplicates = 0
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            user, item, raw = (c.strip() for c in row)
            if not user or not item:
                raise ParseError(f"{path}:{lineno}: empty user or item id")
            try:
                value = float(raw)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: rating {raw!r} is not a number") from None
            if not (RATING_MIN <= value <= RATING_MAX):
                raise RangeError(f"{path}:{lineno}: rating {value} outside [1, 5]")
            key = (user, item)
            if key in seen:
                duplicates += 1
            seen[key] = value
    if duplicates:
        logger.warning("%s: collapsed %d duplicate (user, item) ratings, last value kept", path, duplicates)
    return [RatingRecord(u, i, r) for (u, i), r in seen.items()]


def load_trust(path) -> list[TrustRecord]:
    """Parse a ``trustor,trustee`` CSV, dropping self-loops with one warning."""
    fh, reader = _open_csv(path, ("trustor", "trustee"))
    out: list[TrustRecord] = []
    self_loops = 0
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            a, b = (c.strip() for c in row)
            if not a or not b:
                raise ParseError(f"{path}:{lineno}: empty user id")
            if a == b:
                self_loops += 1
                continue
            out.append(TrustRecord(a, b))
    if self_loops:
        logger.warning("%s: dropped %d self-trust edge(s)", path, self_loops)
    return out


def write_ratings(path, ratings: Iterable[RatingRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "rating"])
        for r in ratings:
            w.writerow([r.user, r.item, f"{r.rating:g}"])


def write_trust(path, trust: Iterable[TrustRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trustor", "trustee"])
        for t in trust:
            w.writerow([t.trustor, t.trustee])


@dataclass
class Graph:
    """Homogeneous graph over users followed by items.

    ``adjacency`` is symmetric with a zero diagonal; ``degrees`` are its row
    sums.  ``features`` is filled by :func:`init_features` (``build_graph``
    does it on construction).
    """

    n_users: int
    n_items: int
    user_ids: list[str]
    item_ids: list[str]
    adjacency: SparseMatrix
    degrees: np.ndarray
    features: Optional[Tensor] = None
    user_index: dict[str, int] = field(default_factory=dict, repr=False)
    item_index: dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    def user_node(self, user: str) -> int:
        return self.user_index[user]

    def item_node(self, item: str) -> int:
        return self.n_users + self.item_index[item]

    def pairs(self, ratings: Sequence[RatingRecord]) -> tuple[np.ndarray, np.ndarray]:
        """Internal ``(user_node, item_node)`` pairs and targets for ``ratings``."""
        users = np.fromiter((self.user_index[r.user] for r in ratings), dtype=np.int64, count=len(ratings))
        items = np.fromiter(
            (self.n_users + self.item_index[r.item] for r in ratings), dtype=np.int64, count=len(ratings)
        )
        targets = np.fromiter((r.rating for r in ratings), dtype=np.float64, count=len(ratings))
        return np.stack([users, items], axis=1).reshape(-1, 2), targets

    def is_cold(self, nodes) -> np.ndarray:
        """True for nodes without any edge in the (train) structure."""
        return self.degrees[np.asarray(nodes)] == 0


def build_graph(
    ratings: Sequence[RatingRecord],
    trust: Sequence[TrustRecord],
    feature_dim: int,
    seed: int,
    universe: Optional[Sequence[RatingRecord]] = None,
) -> Graph:
    """Build the graph from (train-split) ``ratings`` and ``trust``.

    ``universe`` lists extra ratings whose users and items must get node ids
    without contributing edges, so held-out pairs can be scored.  Trust
    edges naming users never seen in any rating still create user nodes.
    """
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for source in (ratings, universe or ()):
        for r in source:
            user_index.setdefault(r.user, len(user_index))
            item_index.setdefault(r.item, len(item_index))
    for t in trust:
        user_index.setdefault(t.trustor, len(user_index))
        user_index.setdefault(t.trustee, len(user_index))
    n_users, n_items = len(user_index), len(item_index)
    n = n_users + n_items

    src = [user_index[r.user] for r in ratings] + [user_index[t.trustor] for t in trust]
    dst = [n_users + item_index[r.item] for r in ratings] + [user_index[t.trustee] for t in trust]
    src_a = np.asarray(src, dtype=np.int64)
    dst_a = np.asarray(dst, dtype=np.int64)
    # symmetrize, then collapse repeats (mutual trust, duplicate records) to weight 1
    rows = np.concatenate([src_a, dst_a])
    cols = np.concatenate([dst_a, src_a])
    summed = SparseMatrix.from_coo(rows, cols, np.ones(rows.size), (n, n))
    adjacency = summed.with_values(np.ones(summed.nnz))

    g = Graph(
        n_users=n_users,
        n_items=n_items,
        user_ids=list(user_index),
        item_ids=list(item_index),
        adjacency=adjacency,
        degrees=adjacency.row_sums(),
        user_index=user_index,
        item_index=item_index,
    )
    g.features = init_features(g, feature_dim, seed)
    return g


def build_train_graph(
    ratings: Sequence[RatingRecord],
    trust: Sequence[TrustRecord],
    splits: "SplitSet",
    feature_dim: int,
    seed: int,
) -> Graph:
    """Edges from the train split plus trust; every rated user and item gets a node."""
    return build_graph([ratings[i] for i in splits.train], trust, feature_dim, seed, universe=ratings)


def renormalize(adjacency: SparseMatrix, degrees: Optional[np.ndarray] = None) -> SparseMatrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``D = diag(degrees + 1)``.

    ``degrees`` defaults to the row sums of ``adjacency``; passing the parent
    graph's degrees keeps a subgraph's entries identical to the full graph's.
    """
    n = adjacency.rows
    if degrees is None:
        degrees = adjacency.row_sums()
    inv_sqrt = 1.0 / np.sqrt(np.asarray(degrees, dtype=np.float64) + 1.0)
    with_self = SparseMatrix.from_scipy(adjacency.scipy() + SparseMatrix.identity(n).scipy())
    vals = with_self.values * inv_sqrt[with_self.row_ids] * inv_sqrt[with_self.indices]
    return with_self.with_values(vals)


def normalize_adjacency(g: Graph) -> SparseMatrix:
    """The renormalized adjacency of ``g``; every row has its self-loop entry."""
    return renormalize(g.adjacency, g.degrees)


def init_features(g: Graph, C: int, seed: int) -> Tensor:
    """Learnable ``N x C`` node embedding table drawn from N(0, 0.1^2)."""
    if C < 1:
        raise ValueError("C must be >= 1")
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, 0.1, size=(g.n_nodes, C)), requires_grad=True, name="features")


@dataclass
class SplitSet:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    ratings_digest: str = ""

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "format": SPLITS_FORMAT,
            "version": SPLITS_VERSION,
            "seed": self.seed,
            "ratings_digest": self.ratings_digest,
            "train": self.train,
            "val": self.val,
            "test": self.test,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitSet":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("format") != SPLITS_FORMAT or obj.get("version") != SPLITS_VERSION:
            raise FormatError(f"{path}: not a {SPLITS_FORMAT} v{SPLITS_VERSION} file")
        return cls(
            train=list(obj["train"]),
            val=list(obj["val"]),
            test=list(obj["test"]),
            seed=int(obj["seed"]),
            ratings_digest=obj.get("ratings_digest", ""),
        )


def ratings_digest(ratings: Sequence[RatingRecord]) -> str:
    h = hashlib.sha256()
    for r in ratings:
        h.update(f"{r.user}\t{r.item}\t{r.rating!r}\n".encode())
    return h.hexdigest()[:16]


def split(ratings: Sequence[RatingRecord], seed: int) -> SplitSet:
    """Seeded shuffle, then contiguous floor(60%) / floor(20%) / remainder cut."""
    n = len(ratings)
    if n < 5:
        raise TooSmallError(f"need at least 5 ratings to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = math.floor(0.6 * n), math.floor(0.2 * n)
    return SplitSet(
        train=order[:n_train].tolist(),
        val=order[n_train : n_train + n_val].tolist(),
        test=order[n_train + n_val :].tolist(),
        seed=seed,
        ratings_digest=ratings_digest(ratings),
    )


def subsample_users(
    ratings: Sequence[RatingRecord],
    trust: Sequence[TrustRecord],
    fraction: float,
    seed: int,
) -> tuple[list[RatingRecord], list[TrustRecord]]:
    """Keep a seeded fraction of rating users with all their ratings and the trust among them."""
    users = list(dict.fromkeys(r.user for r in ratings))
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(users))))
    keep = {users[i] for i in rng.choice(len(users), size=k, replace=False)}
    sub_r = [r for r in ratings if r.user in keep]
    sub_t = [t for t in trust if t.trustor in keep and t.trustee in keep]
    return sub_r, sub_t


def dataset_stats(ratings: Sequence[RatingRecord], trust: Sequence[TrustRecord]) -> dict:
    """Table-style statistics: counts, densities and mean rating."""
    users = {r.user for r in ratings}
    items = {r.item for r in ratings}
    n_u, n_i, n_r, n_t = len(users), len(items), len(ratings), len(trust)
    return {
        "users": n_u,
        "items": n_i,
        "ratings": n_r,
        "rating_density": n_r / (n_u * n_i) if n_u and n_i else 0.0,
        "connections": n_t,
        "social_density": n_t / (n_u * n_u) if n_u else 0.0,
        "mean_rating": float(np.mean([r.rating for r in ratings])) if ratings else float("nan"),
    }
