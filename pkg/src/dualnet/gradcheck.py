"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, float64_mode


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """d fn() / d x by central differences; perturbs ``x.data`` in place and restores it."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn().data)
        flat[i] = orig - eps
        f_minus = float(fn().data)
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, zero when both vanish."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
) -> float:
    """Worst relative error between autodiff and finite differences over ``inputs``.

    ``fn`` must rebuild the graph from ``inputs`` on every call and return a
    scalar. Inputs should be float64 for meaningful results.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs; build them under float64_mode()")
        x.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, x, eps)))
    return worst


__all__ = ["numerical_grad", "relative_error", "gradcheck", "float64_mode"]
