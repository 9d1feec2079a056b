"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..exceptions import NonFiniteValue, ShapeMismatch
from .engine import Tape, Tensor


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar ``f`` against central differences.

    ``f`` takes one Tensor per entry of ``inputs`` (float64 arrays) and must
    return a scalar Tensor; it is re-evaluated O(2 * total elements) times,
    so keep the inputs small.  Returns the max elementwise relative error
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ShapeMismatch(f"eps {eps} outside [1e-7, 1e-3]")
    xs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    with Tape() as tape:
        y = f(*xs)
    if y.data.size != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued function")
    tape.backward(y)

    def evaluate():
        value = f(*xs)
        out = float(value.data)
        if not np.isfinite(out):
            raise NonFiniteValue("non-finite value during finite differencing")
        return out

    worst = 0.0
    for x in xs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate()
            flat[i] = orig - eps
            lo = evaluate()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * eps)
        fd = fd.reshape(x.data.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
        worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
    return worst
