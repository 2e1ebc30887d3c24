"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

DEFAULT_STEP = 1e-6


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """d fn() / d param by central differences, perturbing one entry at a time."""
    base = param.data.copy()
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += step
        param.set_data(plus)
        f_plus = fn().item()
        minus = base.copy()
        minus[idx] -= step
        param.set_data(minus)
        f_minus = fn().item()
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    param.set_data(base)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entry-wise discrepancy relative to the larger of the two max-norms."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = DEFAULT_STEP) -> float:
    """Max relative error between tape and finite-difference gradients over ``params``.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    worst = 0.0
    for p in params:
        worst = max(worst, relative_error(grads[p], numerical_gradient(fn, p, step)))
    return worst
