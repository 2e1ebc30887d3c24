"""Rating predictors: graph transformer, plain GCN, and PMF.

Pairs are always given in graph-internal node ids: users in
``[0, n_users)``, items offset by ``n_users``.  Graph models score a pair by
concatenating the user embedding then the item embedding and applying a
linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .layers import (
    EncoderBlockParams,
    GCLayerParams,
    LinearParams,
    encoder_block_forward,
    gc_forward,
    linear_forward,
)
from .sparse import SparseMatrix
from .tensor import (
    Tensor,
    add,
    concat_cols,
    gather_rows,
    mul,
    reduce_mean,
    row_sum,
    scale,
    sub,
)

MODEL_KINDS = ("gtn", "gcn", "pmf")

# small rating-head weights keep initial predictions at the head bias
HEAD_INIT_STD = 0.01


@dataclass
class PairBatch:
    """``pairs`` is an ``n x 2`` array of (user node, item node); ``targets`` the ratings."""

    pairs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if len(self.pairs) != len(self.targets):
            raise DimensionError(f"{len(self.pairs)} pairs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.pairs[idx], self.targets[idx])


def _check_ids(ids: np.ndarray, low: int, high: int, what: str) -> None:
    if ids.size and (ids.min() < low or ids.max() >= high):
        raise IndexError(f"{what} id outside [{low}, {high})")


@dataclass
class GraphModel:
    """Feature table, GC stack, optional encoder stack, and a linear rating head."""

    n_users: int
    n_items: int
    features: Tensor
    gc_layers: list[GCLayerParams]
    encoder_layers: list[EncoderBlockParams]
    head: LinearParams
    seed: int = 0
    kind: str = field(default="gtn")

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def hidden_dim(self) -> int:
        return self.gc_layers[-1].W.cols

    @property
    def receptive_hops(self) -> int:
        return len(self.gc_layers) + len(self.encoder_layers)

    def parameters(self) -> dict[str, Tensor]:
        out = {"features": self.features}
        for k, layer in enumerate(self.gc_layers):
            out.update(layer.named(f"gc.{k}"))
        for k, block in enumerate(self.encoder_layers):
            out.update(block.named(f"enc.{k}"))
        out.update(self.head.named("out"))
        return out

    def describe(self) -> dict:
        enc = self.encoder_layers
        return {
            "kind": self.kind,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "feature_dim": self.features.cols,
            "hidden_dim": self.hidden_dim,
            "gc_layers": len(self.gc_layers),
            "encoder_layers": len(enc),
            "heads": len(enc[0].mha.heads) if enc else 0,
            "d_head": enc[0].mha.heads[0].d_head if enc else 0,
            "d_ff": enc[0].ffn_in.W.cols if enc else 0,
            "residual": bool(enc[0].residual) if enc else False,
            "seed": self.seed,
        }

    def node_embeddings(
        self,
        adj_norm: SparseMatrix,
        mask: Optional[SparseMatrix] = None,
        node_ids: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Final embeddings for the nodes of ``adj_norm``.

        ``node_ids`` maps subgraph rows to rows of the feature table; omit it
        for the full graph.  ``mask`` defaults to the pattern of ``adj_norm``.
        """
        H = self.features if node_ids is None else gather_rows(self.features, node_ids)
        if H.rows != adj_norm.rows:
            raise DimensionError(f"{H.rows} feature rows for a {adj_norm.rows}-node adjacency")
        for layer in self.gc_layers:
            H = gc_forward(adj_norm, H, layer)
        mask = adj_norm if mask is None else mask
        for block in self.encoder_layers:
            H = encoder_block_forward(H, mask, block)
        return H

    def score(self, embeddings: Tensor, pairs: np.ndarray) -> Tensor:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        _check_ids(pairs, 0, embeddings.rows, "node")
        joined = concat_cols(gather_rows(embeddings, pairs[:, 0]), gather_rows(embeddings, pairs[:, 1]))
        return linear_forward(joined, self.head)

    def forward(self, adj_norm, mask, batch: PairBatch, node_ids=None) -> Tensor:
        return self.score(self.node_embeddings(adj_norm, mask, node_ids), batch.pairs)

    def forward_layered(self, node_ids: np.ndarray, layers: Sequence, pairs: np.ndarray) -> Tensor:
        """Score ``pairs`` through per-layer shrinking node sets.

        ``layers[k]`` carries ``adj`` (output rows x input rows, also the
        attention mask) and ``queries`` (output rows among input rows), as
        built by :func:`gtnrec.training.make_subbatch`.  ``pairs`` index the
        final layer's rows.
        """
        if len(layers) != self.receptive_hops:
            raise DimensionError(f"{len(layers)} layer operators for a {self.receptive_hops}-layer model")
        H = gather_rows(self.features, node_ids)
        for op, layer in zip(layers, self.gc_layers):
            H = gc_forward(op.adj, H, layer)
        for op, block in zip(layers[len(self.gc_layers) :], self.encoder_layers):
            H = encoder_block_forward(H, op.adj, block, queries=op.queries)
        return self.score(H, pairs)


def _graph_model(
    kind: str,
    n_users: int,
    n_items: int,
    hidden_dim: int,
    gc_layers: int,
    encoder_layers: int,
    heads: int,
    feature_dim: Optional[int],
    d_head: Optional[int],
    d_ff: Optional[int],
    residual: bool,
    seed: int,
    bias_init: float,
) -> GraphModel:
    if not 1 <= gc_layers <= 3:
        raise ValueError(f"gc_layers must be in [1, 3], got {gc_layers}")
    feature_dim = hidden_dim if feature_dim is None else feature_dim
    rng = np.random.default_rng(seed)
    n = n_users + n_items
    features = Tensor(rng.normal(0.0, 0.1, size=(n, feature_dim)), requires_grad=True, name="features")
    dims = [feature_dim] + [hidden_dim] * gc_layers
    gcs = [GCLayerParams.init(rng, dims[k], dims[k + 1]) for k in range(gc_layers)]
    encs = [
        EncoderBlockParams.init(rng, hidden_dim, heads, d_head=d_head, d_ff=d_ff, residual=residual)
        for _ in range(encoder_layers)
    ]
    head = LinearParams.init(rng, 2 * hidden_dim, 1, bias=bias_init, std=HEAD_INIT_STD)
    return GraphModel(n_users, n_items, features, gcs, encs, head, seed=seed, kind=kind)


def new_gtn(
    n_users: int,
    n_items: int,
    hidden_dim: int = 32,
    gc_layers: int = 2,
    heads: int = 3,
    encoder_layers: int = 1,
    feature_dim: Optional[int] = None,
    d_head: Optional[int] = None,
    d_ff: Optional[int] = None,
    residual: bool = False,
    seed: int = 0,
    bias_init: float = 0.0,
) -> GraphModel:
    """GC layers followed by neighbor-masked encoder blocks."""
    if encoder_layers < 1:
        raise ValueError("a GTN has at least one encoder layer")
    if heads < 1:
        raise ValueError("heads must be >= 1")
    return _graph_model(
        "gtn", n_users, n_items, hidden_dim, gc_layers, encoder_layers, heads,
        feature_dim, d_head, d_ff, residual, seed, bias_init,
    )


def new_gcn(
    n_users: int,
    n_items: int,
    hidden_dim: int = 32,
    gc_layers: int = 2,
    feature_dim: Optional[int] = None,
    seed: int = 0,
    bias_init: float = 0.0,
) -> GraphModel:
    return _graph_model(
        "gcn", n_users, n_items, hidden_dim, gc_layers, 0, 1,
        feature_dim, None, None, False, seed, bias_init,
    )


@dataclass
class PMFModel:
    """Dot-product latent factors.  ``reg`` weighs the L2 penalty on the factor rows a batch touches.

    ``init_mean`` shifts every factor entry by ``sqrt(init_mean / k)`` so that
    initial predictions sit near that value instead of 0.
    """

    n_users: int
    n_items: int
    U: Tensor
    V: Tensor
    reg: float = 0.01
    seed: int = 0
    kind: str = field(default="pmf")

    @classmethod
    def create(
        cls, n_users: int, n_items: int, k: int, reg: float = 0.01, seed: int = 0, init_mean: float = 0.0
    ) -> "PMFModel":
        if k < 1:
            raise ValueError("k must be >= 1")
        if init_mean < 0:
            raise ValueError("init_mean must be >= 0")
        rng = np.random.default_rng(seed)
        shift = np.sqrt(init_mean / k)
        U = Tensor(shift + rng.normal(0.0, 0.1, size=(n_users, k)), requires_grad=True, name="U")
        V = Tensor(shift + rng.normal(0.0, 0.1, size=(n_items, k)), requires_grad=True, name="V")
        return cls(n_users, n_items, U, V, reg=reg, seed=seed)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def hidden_dim(self) -> int:
        return self.U.cols

    def parameters(self) -> dict[str, Tensor]:
        return {"U": self.U, "V": self.V}

    def describe(self) -> dict:
        return {
            "kind": "pmf",
            "n_users": self.n_users,
            "n_items": self.n_items,
            "hidden_dim": self.hidden_dim,
            "reg": self.reg,
            "seed": self.seed,
        }

    def _factors(self, pairs: np.ndarray):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        _check_ids(pairs[:, 0], 0, self.n_users, "user")
        _check_ids(pairs[:, 1], self.n_users, self.n_nodes, "item")
        return gather_rows(self.U, pairs[:, 0]), gather_rows(self.V, pairs[:, 1] - self.n_users)

    def forward(self, batch: PairBatch) -> Tensor:
        u, v = self._factors(batch.pairs)
        return row_sum(mul(u, v))

    def loss(self, batch: PairBatch) -> Tensor:
        u, v = self._factors(batch.pairs)
        data_term = mse_loss(row_sum(mul(u, v)), batch.targets)
        if self.reg == 0:
            return data_term
        penalty = reduce_mean(add(row_sum(mul(u, u)), row_sum(mul(v, v))))
        return add(data_term, scale(penalty, self.reg))


def gtn_forward(m: GraphModel, adj_norm: SparseMatrix, mask: SparseMatrix, batch: PairBatch, node_ids=None) -> Tensor:
    return m.forward(adj_norm, mask, batch, node_ids)


def gcn_forward(m: GraphModel, adj_norm: SparseMatrix, batch: PairBatch, node_ids=None) -> Tensor:
    return m.forward(adj_norm, None, batch, node_ids)


def pmf_forward(m: PMFModel, batch: PairBatch) -> Tensor:
    return m.forward(batch)


def mse_loss(pred: Tensor, targets) -> Tensor:
    """Mean of squared residuals over an ``n x 1`` prediction column."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if t.size == 0:
        raise ContractError("mse_loss on an empty batch")
    if pred.shape != t.shape:
        raise DimensionError(f"predictions {pred.shape} vs targets {t.shape}")
    r = sub(pred, Tensor._wrap(t))
    return reduce_mean(mul(r, r))


def build_model(kind: str, n_users: int, n_items: int, **kw):
    """Construct a model of ``kind`` from keyword settings (unused keys ignored)."""
    if kind == "gtn":
        keys = ("hidden_dim", "gc_layers", "heads", "encoder_layers", "feature_dim", "d_head", "d_ff", "residual", "seed", "bias_init")
        return new_gtn(n_users, n_items, **{k: kw[k] for k in keys if k in kw})
    if kind == "gcn":
        keys = ("hidden_dim", "gc_layers", "feature_dim", "seed", "bias_init")
        return new_gcn(n_users, n_items, **{k: kw[k] for k in keys if k in kw})
    if kind == "pmf":
        return PMFModel.create(
            n_users,
            n_items,
            kw.get("hidden_dim", 32),
            reg=kw.get("reg", 0.01),
            seed=kw.get("seed", 0),
            init_mean=kw.get("bias_init", 0.0),
        )
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_from_description(desc: dict):
    """Rebuild an (untrained) model with the architecture recorded by ``describe()``."""
    kind = desc["kind"]
    kw = dict(desc)
    kw.pop("kind")
    n_users, n_items = kw.pop("n_users"), kw.pop("n_items")
    if kind == "gtn":
        for k in ("d_head", "d_ff"):
            kw[k] = kw.get(k) or None
    return build_model(kind, n_users, n_items, **kw)
