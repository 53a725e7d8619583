"""
Central finite-difference oracle for the tensor engine.
"""

from typing import Callable, Sequence

import numpy as np

from disp.tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d target by central differences; `target.data` is perturbed in place."""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the magnitude of the numeric gradient."""
    if analytic.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """
    Compare analytic gradients of the scalar `fn()` with central differences.

    Returns the worst relative error over all `inputs`.
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numerical_grad(fn, t, h)))
    return worst
