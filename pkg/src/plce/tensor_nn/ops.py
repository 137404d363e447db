"""Elementwise, shape and reduction ops."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, get_dtype, make_output


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return make_output(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return make_output(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return make_output(a.data * c, (a,), lambda g: (g * c,), "scale")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return make_output(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_output(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_output(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def grad(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_output(out, tensors, grad, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_output(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_output(out, (a,), lambda g: (g.transpose(inverse),), "permute")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return make_output(total, (a,), lambda g: (np.full(a.shape, g, dtype=a.data.dtype),), "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    m = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)
    return make_output(m, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),), "mean")


def weighted_sum(a, weights: np.ndarray) -> Tensor:
    """``sum(a * weights)`` for a constant weight array; handy for projecting to a scalar."""
    a = as_tensor(a)
    w = np.asarray(weights, dtype=a.data.dtype)
    if w.shape != a.shape:
        raise ValueError(f"weighted_sum: shape mismatch {a.shape} vs {w.shape}")
    total = np.asarray((a.data.astype(np.float64) * w).sum(), dtype=a.data.dtype)
    return make_output(total, (a,), lambda g: (g * w,), "weighted_sum")


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()))
