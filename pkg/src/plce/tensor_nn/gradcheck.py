"""Central finite-difference gradient checks.

The analytic side runs at the caller's precision (float32 by default);
the numeric oracle always re-evaluates the forward function in float64
so that its own rounding stays far below the tolerances being tested.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, precision


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float = 1e-6) -> np.ndarray:
    """d fn / d arrays[index] by central differences, evaluated in float64."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    flat = target.reshape(-1)
    grad = out.reshape(-1)
    with precision(np.float64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*[Tensor(a) for a in base]).data.item()
            flat[i] = orig - h
            down = fn(*[Tensor(a) for a in base]).data.item()
            flat[i] = orig
            grad[i] = (up - down) / (2 * h)
    return out


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], dtype=np.float32) -> list[np.ndarray]:
    with precision(dtype):
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = fn(*inputs)
        backward(tape, loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation, relative to the largest numeric gradient entry."""
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(np.asarray(analytic, np.float64) - numeric))) / scale


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], dtype=np.float32, h: float = 1e-6) -> list[float]:
    """Relative error of the analytic gradient of every input of ``fn``."""
    analytic = analytic_grads(fn, arrays, dtype=dtype)
    return [max_rel_error(a, numeric_grad(fn, arrays, i, h=h)) for i, a in enumerate(analytic)]
