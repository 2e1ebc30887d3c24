"""Adam, minibatch subgraph re-indexing, early-stopped training, grid search."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .errors import DimensionError, DivergenceError
from .evaluation import mae, predict, rmse
from .graph import Graph, RatingRecord, SplitSet, normalize_adjacency, renormalize
from .models import GraphModel, PairBatch, PMFModel, build_model, mse_loss
from .sparse import SparseMatrix
from .tensor import Tape, backward

logger = logging.getLogger(__name__)

FULL_GRID = {
    "hidden_dim": [8, 16, 32, 64, 128],
    "batch_size": [32, 64, 128, 512],
    "learning_rate": [0.005, 0.001, 0.05, 0.01],
    "gc_layers": [1, 2, 3],
    "heads": [1, 2, 3],
}


@dataclass
class TrainConfig:
    model: str = "gtn"
    hidden_dim: int = 32
    batch_size: int = 512
    learning_rate: float = 0.005
    gc_layers: int = 2
    heads: int = 3
    encoder_layers: int = 1
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    pmf_reg: float = 0.01
    residual: bool = False
    d_head: Optional[int] = None
    d_ff: Optional[int] = None
    # start the rating head's bias at the train mean instead of 0
    bias_init_mean: bool = True
    subgraph: bool = True
    eval_clamp: bool = False

    def __post_init__(self):
        for name in ("hidden_dim", "batch_size", "learning_rate", "gc_layers", "epochs", "patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model == "gtn" and (self.heads < 1 or self.encoder_layers < 1):
            raise ValueError("gtn needs heads >= 1 and encoder_layers >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def make_model(cfg: TrainConfig, g: Graph, train_targets: Optional[np.ndarray] = None):
    bias = float(np.mean(train_targets)) if cfg.bias_init_mean and train_targets is not None and len(train_targets) else 0.0
    return build_model(
        cfg.model,
        g.n_users,
        g.n_items,
        hidden_dim=cfg.hidden_dim,
        gc_layers=cfg.gc_layers,
        heads=cfg.heads,
        encoder_layers=cfg.encoder_layers,
        d_head=cfg.d_head,
        d_ff=cfg.d_ff,
        residual=cfg.residual,
        seed=cfg.seed,
        bias_init=bias,
        reg=cfg.pmf_reg,
    )


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_delta(grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float, state: AdamState):
    """New moments and the parameter decrement for one Adam step at count ``t``."""
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    return m, v, lr * (m_hat / (np.sqrt(v_hat) + state.eps))


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update; parameters absent from ``grads`` get a zero gradient."""
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m, v, delta = adam_delta(g, m, v, state.t, lr, state)
        state.m[name], state.v[name] = m, v
        p.set_data(p.data - delta)
    return state


# -- subgraph re-indexing -----------------------------------------------------


@dataclass
class SubLayer:
    """Operator for one layer of a subgraph pass.

    ``adj`` maps the layer's input rows to its output rows (a rectangular
    slice of the subgraph's renormalized adjacency); ``queries`` are the
    positions of the output rows among the input rows.
    """

    adj: SparseMatrix
    queries: np.ndarray


@dataclass
class SubBatch:
    """Receptive-field closure of one minibatch, re-indexed to ``[0, n_hat)``.

    ``node_ids[new] = old``; ``pairs`` are in new ids.  ``layers[k]`` shrinks
    the node set to the nodes still needed after layer ``k``, so the last
    layer computes only the batch endpoints; ``out_index`` holds the new
    ids of those final rows and ``local_pairs`` the pairs in that row order.
    """

    adj_norm: SparseMatrix
    node_ids: np.ndarray
    pairs: np.ndarray
    targets: np.ndarray
    layers: list[SubLayer] = field(default_factory=list)
    out_index: Optional[np.ndarray] = None
    local_pairs: Optional[np.ndarray] = None

    @property
    def n_nodes(self) -> int:
        return int(self.node_ids.size)

    def to_old(self, new) -> np.ndarray:
        return self.node_ids[np.asarray(new)]

    def to_new(self, old) -> np.ndarray:
        old = np.asarray(old, dtype=np.int64)
        pos = np.searchsorted(self.node_ids, old)
        if np.any(pos >= self.node_ids.size) or np.any(self.node_ids[np.minimum(pos, self.node_ids.size - 1)] != old):
            raise KeyError("node not in subgraph")
        return pos

    @property
    def batch(self) -> PairBatch:
        return PairBatch(self.pairs, self.targets)


def hop_distances(adjacency: SparseMatrix, seeds, depth: int) -> np.ndarray:
    """Breadth-first hop count from ``seeds``, ``-1`` beyond ``depth``."""
    a = adjacency.scipy()
    dist = np.full(adjacency.rows, -1, dtype=np.int64)
    frontier = np.unique(np.asarray(seeds, dtype=np.int64))
    dist[frontier] = 0
    for hop in range(1, depth + 1):
        if frontier.size == 0:
            break
        reached = np.unique(a[frontier].indices)
        frontier = reached[dist[reached] < 0]
        dist[frontier] = hop
    return dist


def khop_closure(adjacency: SparseMatrix, seeds, depth: int) -> np.ndarray:
    """Sorted ids of every node within ``depth`` hops of ``seeds``."""
    return np.flatnonzero(hop_distances(adjacency, seeds, depth) >= 0)


def make_subbatch(
    g: Graph,
    pairs,
    depth: int,
    targets=None,
    parent_degrees: bool = True,
    n_layers: Optional[int] = None,
) -> SubBatch:
    """Extract and re-index the ``depth``-hop neighborhood of the batch endpoints.

    The renormalized adjacency is recomputed on the subgraph.  With
    ``parent_degrees`` the degree matrix comes from the full graph, so every
    entry touching a node inside the receptive field equals the full-graph
    value; otherwise degrees are counted inside the subgraph, which only
    matches when the closure is one hop deeper than the model needs.

    ``n_layers`` (default ``depth``) sets how many per-layer operators are
    built: after layer ``k`` only nodes within ``n_layers - k`` hops remain.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n_layers = depth if n_layers is None else n_layers
    if n_layers > depth:
        raise ValueError(f"{n_layers} layers need a closure of depth >= {n_layers}, got {depth}")
    dist_all = hop_distances(g.adjacency, pairs.ravel(), depth)
    nodes = np.flatnonzero(dist_all >= 0)
    dist = dist_all[nodes]
    old_to_new = np.full(g.n_nodes, -1, dtype=np.int64)
    old_to_new[nodes] = np.arange(nodes.size)
    sub = SparseMatrix.from_scipy(g.adjacency.scipy()[nodes][:, nodes])
    adj_norm = renormalize(sub, g.degrees[nodes] if parent_degrees else None)
    new_pairs = old_to_new[pairs]

    square = adj_norm.scipy()
    layers = []
    prev = np.arange(nodes.size)
    for k in range(1, n_layers + 1):
        rows = np.flatnonzero(dist <= n_layers - k)
        block = SparseMatrix.from_scipy(square[rows][:, prev])
        layers.append(SubLayer(block, np.searchsorted(prev, rows)))
        prev = rows
    tgt = np.zeros(len(pairs)) if targets is None else np.asarray(targets, dtype=np.float64)
    return SubBatch(
        adj_norm=adj_norm,
        node_ids=nodes,
        pairs=new_pairs,
        targets=tgt,
        layers=layers,
        out_index=prev,
        local_pairs=np.searchsorted(prev, new_pairs),
    )


def _worker_count() -> int:
    raw = os.environ.get("GTNREC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer GTNREC_THREADS=%r", raw)
    return os.cpu_count() or 1


def _prefetch(items: Sequence, build, workers: int, lookahead: int = 4) -> Iterator:
    """``map(build, items)`` in order, computed up to ``lookahead`` ahead on worker threads."""
    if workers <= 1:
        for it in items:
            yield build(it)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        it = iter(items)
        for x in itertools.islice(it, lookahead):
            pending.append(pool.submit(build, x))
        while pending:
            fut = pending.pop(0)
            for x in itertools.islice(it, 1):
                pending.append(pool.submit(build, x))
            yield fut.result()


# -- training loop --------------------------------------------------------------


@dataclass
class RunHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def best_val_rmse(self) -> float:
        return min(self.val_rmse) if self.val_rmse else math.inf

    def write_csv(self, path, digest: str = "") -> None:
        """Deterministic per-epoch metrics; wall-clock goes to :meth:`write_timing`."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_mae", "val_rmse", "digest"])
            for e, tl, vm, vr in zip(self.epoch, self.train_loss, self.val_mae, self.val_rmse):
                w.writerow([e, f"{tl:.6f}", f"{vm:.6f}", f"{vr:.6f}", digest])

    def write_timing(self, path, digest: str = "") -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "seconds", "digest"])
            for e, s in zip(self.epoch, self.seconds):
                w.writerow([e, f"{s:.6f}", digest])


def _batch_loss(model, g: Graph, batch: PairBatch, cfg: TrainConfig, adj_full, sub: Optional[SubBatch]):
    if isinstance(model, PMFModel):
        return model.loss(batch)
    if sub is not None:
        pred = model.forward_layered(sub.node_ids, sub.layers, sub.local_pairs)
    else:
        pred = model.forward(adj_full, None, batch)
    return mse_loss(pred, batch.targets)


def train(
    model,
    g: Graph,
    ratings: Sequence[RatingRecord],
    splits: SplitSet,
    cfg: TrainConfig,
    out_dir=None,
    digest: str = "",
    manifest_extra: Optional[dict] = None,
):
    """Adam on the squared-error loss with per-epoch validation and early stopping.

    Returns the model holding its best-validation parameters, and the history.
    """
    train_batch = PairBatch(*g.pairs([ratings[i] for i in splits.train]))
    val_batch = PairBatch(*g.pairs([ratings[i] for i in splits.val]))
    adj_full = normalize_adjacency(g)
    params = model.parameters()
    state = AdamState()
    history = RunHistory()
    best_rmse = math.inf
    best_params = None
    bad_epochs = 0
    depth = model.receptive_hops if isinstance(model, GraphModel) else 0
    use_sub = cfg.subgraph and isinstance(model, GraphModel)
    workers = _worker_count()

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_batch))
        chunks = [order[k : k + cfg.batch_size] for k in range(0, len(order), cfg.batch_size)]

        def build(idx):
            b = train_batch.take(idx)
            return b, (make_subbatch(g, b.pairs, depth, b.targets) if use_sub else None)

        total, count = 0.0, 0
        for batch, sub in _prefetch(chunks, build, workers):
            with Tape() as tape:
                loss = _batch_loss(model, g, batch, cfg, adj_full, sub)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, cfg.learning_rate, value)
            grads = backward(tape, loss)
            adam_step(params, {n: grads[p] for n, p in params.items()}, state, cfg.learning_rate)
            total += value * len(batch)
            count += len(batch)

        pred = predict(model, g, val_batch.pairs, adj_norm=adj_full, clamp=cfg.eval_clamp)
        if not np.all(np.isfinite(pred)):
            raise DivergenceError(epoch, cfg.learning_rate, float("nan"))
        v_mae, v_rmse = mae(pred, val_batch.targets), rmse(pred, val_batch.targets)
        history.epoch.append(epoch)
        history.train_loss.append(total / max(count, 1))
        history.val_mae.append(v_mae)
        history.val_rmse.append(v_rmse)
        history.seconds.append(time.perf_counter() - start)
        history.stopped_epoch = epoch
        logger.info("epoch %d loss %.6f val_mae %.6f val_rmse %.6f", epoch, history.train_loss[-1], v_mae, v_rmse)

        if v_rmse < best_rmse:
            best_rmse = v_rmse
            history.best_epoch = epoch
            best_params = {n: p.data for n, p in params.items()}
            bad_epochs = 0
            if out_dir is not None:
                extra = {"digest": digest, "best_epoch": epoch, "val_rmse": v_rmse}
                extra.update(manifest_extra or {})
                save_checkpoint(out_dir, model, extra)
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    if best_params is not None:
        for n, p in params.items():
            p.set_data(best_params[n])
    return model, history


# -- grid search --------------------------------------------------------------


@dataclass
class GridResult:
    rows: list[tuple[TrainConfig, float]]
    best: TrainConfig
    best_rmse: float

    def write_csv(self, path, digest: str = "") -> None:
        keys = list(self.rows[0][0].to_dict())
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys + ["best_val_rmse", "digest"])
            for cfg, score in self.rows:
                d = cfg.to_dict()
                w.writerow([d[k] for k in keys] + [f"{score:.6f}", digest])


def expand_grid(base: TrainConfig, grid: dict[str, Iterable]) -> list[TrainConfig]:
    """Every combination of ``grid`` values over ``base``, in lexicographic order."""
    if not grid:
        return [base]
    keys = sorted(grid)
    values = [sorted(set(grid[k])) for k in keys]
    if any(not v for v in values):
        raise ValueError("grid has an empty value list")
    return [base.replace(**dict(zip(keys, combo))) for combo in itertools.product(*values)]


def grid_search(
    g: Graph,
    ratings: Sequence[RatingRecord],
    splits: SplitSet,
    grid: dict[str, Iterable],
    base: Optional[TrainConfig] = None,
) -> GridResult:
    """Train every configuration and keep the one with the lowest validation RMSE.

    Ties go to the configuration that comes first in lexicographic order.
    """
    base = base or TrainConfig()
    configs = expand_grid(base, grid)
    train_targets = np.array([ratings[i].rating for i in splits.train])
    rows = []
    for cfg in configs:
        model = make_model(cfg, g, train_targets)
        _, hist = train(model, g, ratings, splits, cfg)
        rows.append((cfg, hist.best_val_rmse))
        logger.info("grid %s -> best val rmse %.6f", {k: getattr(cfg, k) for k in grid}, hist.best_val_rmse)
    best_i = min(range(len(rows)), key=lambda i: (rows[i][1], i))
    return GridResult(rows=rows, best=rows[best_i][0], best_rmse=rows[best_i][1])
