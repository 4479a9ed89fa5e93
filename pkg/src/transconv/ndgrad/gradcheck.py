"""Central finite-difference gradient checking (use in 64-bit mode)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``target.data`` entries."""
    flat = target.data.reshape(-1)
    grad = np.zeros(flat.size)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        plus = float(fn().data)
        flat[i] = orig - h
        minus = float(fn().data)
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * h)
    return grad.reshape(target.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise ``|a - n| / max(|a|, |n|, floor * scale)``.

    ``scale`` is ``max(1, max|a|)``; entries far below the gradient's own
    magnitude are therefore compared on an absolute basis.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    scale = max(1.0, float(np.max(np.abs(a))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Return the worst relative error between backprop and finite differences.

    ``max_entries`` samples a subset of coordinates per input (all by default).
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        idx = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_grad(fn, t, h=h, indices=idx)
        if idx is not None:
            worst = max(worst, max_relative_error(a.reshape(-1)[idx], numeric.reshape(-1)[idx]))
        else:
            worst = max(worst, max_relative_error(a, numeric))
    return worst
