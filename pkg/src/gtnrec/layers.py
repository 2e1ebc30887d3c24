"""Graph convolution, neighbor-masked attention and the encoder block.

Every forward takes its parameters as a small record of tensors so the same
code runs on the full graph and on re-indexed subgraphs.  Attention is
computed per stored entry of the mask, never as a dense N x N matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateFeatureError, DimensionError
from .sparse import SparseMatrix, edge_dot, edge_softmax, edge_spmm, spmm
from .tensor import (
    Tensor,
    add,
    concat_cols,
    gather_rows,
    matmul,
    mul,
    power,
    relu,
    row_mean,
    row_var,
    scale,
    sub,
)

LN_EPS = 1e-5


def gaussian(rng: np.random.Generator, fan_in: int, fan_out: int, name: str, std: Optional[float] = None) -> Tensor:
    """Normal initialization, Glorot-scaled unless ``std`` is given."""
    std = math.sqrt(2.0 / (fan_in + fan_out)) if std is None else std
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


@dataclass
class GCLayerParams:
    W: Tensor

    @classmethod
    def init(cls, rng, c_in: int, c_out: int) -> "GCLayerParams":
        return cls(gaussian(rng, c_in, c_out, "W"))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W}


@dataclass
class AttentionHeadParams:
    Q: Tensor
    K: Tensor
    V: Tensor

    def __post_init__(self):
        if not (self.Q.shape == self.K.shape == self.V.shape):
            raise DimensionError(f"Q/K/V shapes differ: {self.Q.shape}, {self.K.shape}, {self.V.shape}")

    @property
    def d_head(self) -> int:
        return self.Q.cols

    @classmethod
    def init(cls, rng, d_model: int, d_head: int) -> "AttentionHeadParams":
        return cls(*(gaussian(rng, d_model, d_head, n) for n in "QKV"))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.Q": self.Q, f"{prefix}.K": self.K, f"{prefix}.V": self.V}


@dataclass
class MultiHeadParams:
    heads: list[AttentionHeadParams]
    O: Tensor

    def __post_init__(self):
        if not self.heads:
            raise DimensionError("need at least one attention head")
        width = sum(h.d_head for h in self.heads)
        if self.O.rows != width:
            raise DimensionError(f"O has {self.O.rows} rows, heads concatenate to {width}")

    @classmethod
    def init(cls, rng, d_model: int, n_heads: int, d_head: int) -> "MultiHeadParams":
        heads = [AttentionHeadParams.init(rng, d_model, d_head) for _ in range(n_heads)]
        return cls(heads, gaussian(rng, n_heads * d_head, d_model, "O"))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, h in enumerate(self.heads):
            out.update(h.named(f"{prefix}.head.{k}"))
        out[f"{prefix}.O"] = self.O
        return out


@dataclass
class LinearParams:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, bias: float = 0.0, std: Optional[float] = None) -> "LinearParams":
        return cls(gaussian(rng, d_in, d_out, "W", std), _const(bias, (1, d_out), "b"))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


@dataclass
class EncoderBlockParams:
    mha: MultiHeadParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_in: LinearParams
    ffn_out: LinearParams
    residual: bool = field(default=False)

    def __post_init__(self):
        d_model, d_ff = self.ffn_in.W.shape
        if d_ff < d_model:
            raise DimensionError(f"feed-forward width {d_ff} below model width {d_model}")

    @property
    def d_model(self) -> int:
        return self.ffn_in.W.rows

    @classmethod
    def init(
        cls,
        rng,
        d_model: int,
        n_heads: int,
        d_head: Optional[int] = None,
        d_ff: Optional[int] = None,
        residual: bool = False,
    ) -> "EncoderBlockParams":
        d_head = d_model if d_head is None else d_head
        d_ff = 4 * d_model if d_ff is None else d_ff
        return cls(
            mha=MultiHeadParams.init(rng, d_model, n_heads, d_head),
            ln1_gain=_const(1.0, (1, d_model), "gain"),
            ln1_bias=_const(0.0, (1, d_model), "bias"),
            ln2_gain=_const(1.0, (1, d_model), "gain"),
            ln2_bias=_const(0.0, (1, d_model), "bias"),
            ffn_in=LinearParams.init(rng, d_model, d_ff),
            ffn_out=LinearParams.init(rng, d_ff, d_model),
            residual=residual,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.mha.named(prefix)
        out.update(
            {
                f"{prefix}.ln1.gain": self.ln1_gain,
                f"{prefix}.ln1.bias": self.ln1_bias,
                f"{prefix}.ln2.gain": self.ln2_gain,
                f"{prefix}.ln2.bias": self.ln2_bias,
            }
        )
        out.update(self.ffn_in.named(f"{prefix}.ffn.1"))
        out.update(self.ffn_out.named(f"{prefix}.ffn.2"))
        return out


def gc_forward(adj_norm: SparseMatrix, H: Tensor, p: GCLayerParams) -> Tensor:
    """``relu(adj_norm @ H @ W)``.

    ``adj_norm`` may be a rectangular slice (output nodes x input nodes).
    """
    if adj_norm.cols != H.rows:
        raise DimensionError(f"gc_forward: adjacency {adj_norm.shape} for {H.rows} nodes")
    if H.cols != p.W.rows:
        raise DimensionError(f"gc_forward: features {H.shape} x weight {p.W.shape}")
    return relu(matmul(spmm(adj_norm, H), p.W))


def _query_rows(H: Tensor, mask: SparseMatrix, queries) -> Tensor:
    Hq = H if queries is None else gather_rows(H, queries)
    if mask.shape != (Hq.rows, H.rows):
        raise DimensionError(f"attention: mask {mask.shape} for {Hq.rows} queries over {H.rows} nodes")
    return Hq


def masked_attention_forward(
    H: Tensor, mask: SparseMatrix, p: AttentionHeadParams, return_weights: bool = False, queries=None
):
    """Scaled dot-product attention of each node over its mask row.

    Every mask row must contain the querying node itself; logits are scaled
    by ``1/sqrt(d_head)``.  ``queries`` restricts the output to those rows
    of ``H`` (the mask is then ``len(queries) x H.rows``).  With
    ``return_weights`` the per-entry softmax weights (CSR order of ``mask``)
    are returned alongside the output.
    """
    Hq = _query_rows(H, mask, queries)
    q, k, v = matmul(Hq, p.Q), matmul(H, p.K), matmul(H, p.V)
    logits = scale(edge_dot(mask, q, k), 1.0 / math.sqrt(p.d_head))
    weights = edge_softmax(logits, mask)
    out = edge_spmm(mask, weights, v)
    return (out, weights) if return_weights else out


def multi_head_forward(H: Tensor, mask: SparseMatrix, p: MultiHeadParams, queries=None) -> Tensor:
    heads = [masked_attention_forward(H, mask, h, queries=queries) for h in p.heads]
    joined = heads[0] if len(heads) == 1 else concat_cols(*heads)
    return matmul(joined, p.O)


def layer_norm(H: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row standardization (population variance) followed by a feature-wise affine map."""
    if H.cols < 2:
        raise DegenerateFeatureError(f"layer_norm needs >= 2 features, got {H.cols}")
    centered = sub(H, row_mean(H))
    inv_std = power(add(row_var(H), eps), -0.5)
    return add(mul(mul(centered, inv_std), gain), bias)


def linear_forward(h: Tensor, p: LinearParams) -> Tensor:
    if h.cols != p.W.rows:
        raise DimensionError(f"linear: input {h.shape} x weight {p.W.shape}")
    return add(matmul(h, p.W), p.b)


def encoder_block_forward(H: Tensor, mask: SparseMatrix, p: EncoderBlockParams, queries=None) -> Tensor:
    """Multi-head attention, then ``LN(MLP(LN(.)))``.

    No skip connections unless the block was built with ``residual=True``.
    ``queries`` works as in :func:`masked_attention_forward`.
    """
    a = multi_head_forward(H, mask, p.mha, queries)
    if p.residual:
        a = add(a, _query_rows(H, mask, queries))
    n1 = layer_norm(a, p.ln1_gain, p.ln1_bias)
    f = linear_forward(relu(linear_forward(n1, p.ffn_in)), p.ffn_out)
    if p.residual:
        f = add(f, n1)
    return layer_norm(f, p.ln2_gain, p.ln2_bias)
