"""Central finite-difference oracle for checking backward rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int,
                 h: float = 1e-4) -> np.ndarray:
    """d fn / d arrays[which] by central differences in float64."""
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = arrays[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig - h
        fm = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise relative error.

    The denominator is floored at 1e-3 of the gradient's largest entry so
    that near-zero components are judged against the gradient's scale.
    """
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    h: float = 1e-4) -> float:
    """Worst relative error over all inputs of a scalar-valued ``fn``."""
    analytic = analytic_grad(fn, arrays)
    worst = 0.0
    for i in range(len(arrays)):
        numeric = numeric_grad(fn, arrays, i, h)
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst
