"""Dense 2-D tensors with reverse-mode differentiation on an explicit tape.

A :class:`Tape` is opened as a context manager around one forward pass.  Every
operation whose inputs participate (a parameter with ``requires_grad=True`` or a
tensor already produced on the same tape) is recorded together with the rule
that maps the output gradient to input gradients.  :func:`backward` then walks
the recorded nodes in reverse order.

Outside an open tape operations are plain numpy computations; that is the
inference path.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "backward",
    "current_tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "power",
    "gather_rows",
    "concat_cols",
    "row_sum",
    "row_mean",
    "row_var",
    "reduce_sum",
    "reduce_mean",
]

_local = threading.local()


def current_tape() -> Optional["Tape"]:
    """The innermost tape open on this thread, or ``None``."""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable row-major 2-D array of float64.

    Scalars become 1x1 and 1-D input becomes a single row.  Parameters are
    tensors created with ``requires_grad=True``; an optimizer replaces their
    ``data`` wholesale rather than writing into it.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_index")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.ndim != 2:
            arr = np.atleast_2d(arr)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        t._tape = None
        t._index = -1
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def set_data(self, arr: np.ndarray) -> None:
        """Rebind the value (optimizer use); shape must not change."""
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot rebind {self.shape} tensor to {arr.shape}")
        arr.flags.writeable = False
        self.data = arr

    def to_csv(self, path) -> None:
        """Debug dump, one row per line, ``%.17g`` so values round-trip exactly."""
        np.savetxt(path, self.data, fmt="%.17g", delimiter=",")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        grad = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("value", "parents", "rule")

    def __init__(self, value, parents, rule):
        self.value = value
        self.parents = parents
        self.rule = rule


class GradientMap(dict):
    """Parameter tensor -> gradient array.

    Looking up a parameter the loss never touched yields zeros of its shape.
    """

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros_like(key.data)


class Tape:
    """Recorded operations of one forward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted.  A tape supports a single :func:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_of: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def index_of(self, t: Tensor) -> Optional[int]:
        """Node index of ``t`` on this tape, registering parameters as leaves."""
        if t._tape is self:
            return t._index
        if not t.requires_grad:
            return None
        idx = self._leaf_of.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node(t, (), None))
            self._leaf_of[id(t)] = idx
            self._leaves.append(t)
        return idx

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward; open a fresh tape")
        parents = tuple(self.index_of(t) for t in inputs)
        if all(p is None for p in parents):
            return out
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, parents, rule))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self._leaves)

    def backward(self, loss: Tensor) -> GradientMap:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Gradients of a 1x1 ``loss`` with respect to every parameter on ``tape``."""
    if tape.consumed:
        raise TapeError("backward already called on this tape")
    if loss.shape != (1, 1):
        raise TapeError(f"loss must be 1x1, got {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss._index] = np.ones((1, 1))
    for i in range(loss._index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.rule is None:
            continue
        for p, gp in zip(node.parents, node.rule(g)):
            if p is None or gp is None:
                continue
            prev = grads[p]
            grads[p] = gp if prev is None else prev + gp
        if i != loss._index:
            grads[i] = None
    tape.consumed = True
    out = GradientMap()
    for param in tape._leaves:
        g = grads[tape._leaf_of[id(param)]]
        out[param] = np.zeros_like(param.data) if g is None else g
    # outputs point back at the tape; dropping the nodes breaks the cycle now
    tape.nodes = []
    return out


def _op(out: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    y = Tensor._wrap(out)
    tape = current_tape()
    if tape is None:
        return y
    return tape.record(y, inputs, rule)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(ax for ax in range(2) if shape[ax] == 1 and g.shape[ax] != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, what: str) -> None:
    for ax in range(2):
        da, db = a.shape[ax], b.shape[ax]
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _op(ad * bd, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _op(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _op(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    # subgradient at exactly 0 is 0
    return _op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p``; caller keeps the base positive for fractional ``p``."""
    p = float(p)
    ad = a.data
    return _op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows of ``a`` selected (with repetition allowed) by an integer index list."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows takes a 1-D index")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise IndexError(f"row index out of range for {a.rows} rows")
    n, c = a.shape

    def rule(g):
        out = np.zeros((n, c))
        np.add.at(out, idx, g)
        return (out,)

    return _op(a.data[idx], (a,), rule)


def concat_cols(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise DimensionError("concat_cols needs at least one tensor")
    rows = tensors[0].rows
    if any(t.rows != rows for t in tensors):
        raise DimensionError(f"concat_cols: row counts {[t.rows for t in tensors]}")
    bounds = np.cumsum([0] + [t.cols for t in tensors])

    def rule(g):
        return tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(tensors)))

    return _op(np.concatenate([t.data for t in tensors], axis=1), tensors, rule)


def row_sum(a: Tensor) -> Tensor:
    c = a.cols
    return _op(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, c, axis=1),))


def row_mean(a: Tensor) -> Tensor:
    c = a.cols
    return _op(a.data.mean(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g / c, c, axis=1),))


def row_var(a: Tensor) -> Tensor:
    """Population variance of each row (divides by the column count)."""
    c = a.cols
    centered = a.data - a.data.mean(axis=1, keepdims=True)
    # d var / d x_k = 2 (x_k - mean) / C; the mean term's contribution cancels
    return _op((centered**2).mean(axis=1, keepdims=True), (a,), lambda g: (g * 2.0 * centered / c,))


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _op(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def reduce_mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size
    return _op(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))
