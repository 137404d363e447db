"""Dense tensors and the reverse-mode tape.

Ops record themselves on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient.  ``backward`` walks the tape in exact
reverse recording order; leaf tensors accumulate into ``.grad`` so two
passes without ``zero_grad`` double the gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _dtype_stack():
    if not hasattr(_state, "dtypes"):
        _state.dtypes = [np.float32]
    return _state.dtypes


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def get_dtype():
    return _dtype_stack()[-1]


@contextlib.contextmanager
def precision(dtype):
    """Run kernels at ``dtype`` (``np.float32`` by default, ``np.float64`` for checks)."""
    stack = _dtype_stack()
    stack.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_dtype(), order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul, scale
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of op applications, usable as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.nodes.append(_Node(out, tuple(inputs), backward))


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_output(data: np.ndarray, inputs: Sequence, backward: Callable, op: str) -> Tensor:
    """Wrap an op result and record it if any input needs a gradient."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, inputs, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through ``tape`` into the ``.grad`` of leaf tensors."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring a gradient")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t.is_leaf:
                gi = gi.astype(t.data.dtype, copy=False)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
