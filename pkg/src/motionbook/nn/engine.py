"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient slot.  While a
``Tape`` is active (as a context manager), every op executed on tensors
that require gradients appends a node with the saved state needed for its
backward pass; ``Tape.backward`` then visits the nodes exactly once in
reverse execution order.  With no active tape, ops run as plain forward
numpy calls, so inference over frozen parameters carries no bookkeeping
and is thread-safe (the tape stack is thread-local).

Every op output (and every backward contribution) is checked for NaN/Inf
and raises ``NonFiniteValue`` at the first offender instead of letting it
propagate.
"""

from __future__ import annotations

import threading

import numpy as np

from ..exceptions import NonFiniteValue, ShapeMismatch

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    """The innermost active Tape of the current thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def check_finite(data: np.ndarray, where: str) -> np.ndarray:
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFiniteValue(f"non-finite value produced by {where}")
    return data


class Tensor:
    """An ndarray with an optional gradient slot.

    ``requires_grad`` marks leaves (parameters) whose gradients should be
    accumulated; tensors produced by ops inherit it from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise ShapeMismatch(f"unsupported tensor dtype {arr.dtype}")
        check_finite(arr, "Tensor()")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    # -- operator sugar (implemented in ops.py, bound at import time) --------

    def __add__(self, other):
        return _OPS["add"](self, other)

    def __radd__(self, other):
        return _OPS["add"](other, self)

    def __sub__(self, other):
        return _OPS["sub"](self, other)

    def __rsub__(self, other):
        return _OPS["sub"](other, self)

    def __mul__(self, other):
        return _OPS["mul"](self, other)

    def __rmul__(self, other):
        return _OPS["mul"](other, self)

    def __truediv__(self, other):
        return _OPS["div"](self, other)

    def __neg__(self):
        return _OPS["neg"](self)

    def __matmul__(self, other):
        return _OPS["matmul"](self, other)

    def __pow__(self, exponent):
        return _OPS["pow"](self, exponent)

    def sum(self, axis=None, keepdims=False):
        return _OPS["sum"](self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _OPS["mean"](self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return _OPS["reshape"](self, *shape)

    def transpose(self, *axes):
        return _OPS["transpose"](self, *axes)


_OPS: dict = {}  # filled by ops.py to avoid a circular import


def register_op(name, fn):
    _OPS[name] = fn


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed ops; backward walks it in reverse once."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        """Accumulate gradients of a scalar ``loss`` into ``.grad`` slots."""
        if loss.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            parent_grads = node.backward(out_grad)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                grad = np.asarray(grad)
                if grad.shape != parent.data.shape:
                    raise ShapeMismatch(
                        f"backward produced grad of shape {grad.shape} for parent {parent.data.shape}"
                    )
                check_finite(grad, "backward pass")
                if parent.grad is None:
                    parent.grad = grad
                else:
                    parent.grad = parent.grad + grad


def record(out: Tensor, parents: tuple, backward) -> Tensor:
    """Attach ``out`` to the active tape if any parent requires gradients."""
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._nodes.append(_Node(out, parents, backward))
    return out
