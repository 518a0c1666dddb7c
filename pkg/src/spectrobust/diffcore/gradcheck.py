"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, default_dtype


def numerical_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar-valued ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        f_plus = float(fn(Tensor(x)).data)
        flat[i] = saved - h
        f_minus = float(fn(Tensor(x)).data)
        flat[i] = saved
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def analytic_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = fn(leaf)
    out.backward()
    return np.zeros_like(leaf.data) if leaf.grad is None else np.array(leaf.grad)


def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-4,
    eps_abs: float = 1e-6,
    indices: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between the backpropagated and central-difference gradients.

    Runs in float64. The error for element i is
    ``|analytic_i - numeric_i| / (|analytic_i| + eps_abs)``. ``indices`` restricts
    the numeric side to a subset of flat positions, which keeps checks on image
    sized inputs affordable.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    with default_dtype(np.float64):
        x = np.array(x, dtype=np.float64)
        analytic = analytic_gradient(fn, x).reshape(-1)
        if indices is None:
            numeric = numerical_gradient(fn, x, h).reshape(-1)
            a = analytic
        else:
            indices = np.asarray(indices).reshape(-1)
            numeric = np.empty(len(indices))
            flat = x.reshape(-1)
            for k, i in enumerate(indices):
                saved = flat[i]
                flat[i] = saved + h
                f_plus = float(fn(Tensor(x)).data)
                flat[i] = saved - h
                f_minus = float(fn(Tensor(x)).data)
                flat[i] = saved
                numeric[k] = (f_plus - f_minus) / (2.0 * h)
            a = analytic[indices]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / (np.abs(a) + eps_abs)))
