"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn().data.sum()
        flat[i] = orig - eps
        minus = fn().data.sum()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.abs(analytic - numeric).max(initial=0.0)
    den = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(num / den)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Worst relative error between analytic and numeric gradients over ``inputs``.

    ``fn`` must rebuild the graph on each call; non-scalar outputs are summed.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward(np.ones_like(out.data))
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, eps)))
    return worst
