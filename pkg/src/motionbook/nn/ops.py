"""Differentiable ops on Tensors.

Each op computes its forward value with numpy, checks it for NaN/Inf, and
registers a backward closure on the active tape.  Backward closures return
one gradient per parent (or None where no gradient flows).
"""

from __future__ import annotations

import numpy as np

from ..exceptions import IndexOutOfRange, ShapeMismatch
from .engine import Tensor, as_tensor, check_finite, record, register_op


def _out(data, op_name: str) -> Tensor:
    check_finite(np.asarray(data), op_name)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _out(a.data + b.data, "add")

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _out(a.data - b.data, "sub")

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _out(a.data * b.data, "mul")
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _out(a.data / b.data, "div")
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / b_data, a_data.shape)
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape)
        return ga, gb

    return record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _out(-a.data, "neg")
    return record(out, (a,), lambda g: (-g,))


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = _out(a.data ** p, "pow")
    a_data = a.data

    def backward(g):
        return (g * p * a_data ** (p - 1.0),)

    return record(out, (a,), backward)


def absolute(a) -> Tensor:
    """|x| with sign subgradient (0 at 0)."""
    a = as_tensor(a)
    out = _out(np.abs(a.data), "absolute")
    sign = np.sign(a.data)
    return record(out, (a,), lambda g: (g * sign,))


# -- activations ---------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _out(np.maximum(a.data, 0), "relu")
    mask = a.data > 0
    return record(out, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximation GELU (GPT-2 flavor) with its exact gradient."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = _out(0.5 * x * (1.0 + t), "gelu")

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return record(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))  # only ever exponentiate non-positive values
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _out(s, "sigmoid")
    return record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = _out(t, "tanh")
    return record(out, (a,), lambda g: (g * (1.0 - t ** 2),))


def binary_entropy(p) -> Tensor:
    """Elementwise binary entropy in nats, exact at p in {0, 1}.

    The backward pass clips p into [1e-12, 1-1e-12] before taking the
    log-ratio, so gradients stay finite at the saturated endpoints where
    the true derivative diverges.
    """
    p = as_tensor(p)
    v = p.data

    def _xlogx(u):
        return np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)), 0.0)

    out = _out(-(_xlogx(v) + _xlogx(1.0 - v)), "binary_entropy")

    def backward(g):
        pc = np.clip(v, 1e-12, 1.0 - 1e-12)
        return (g * np.log((1.0 - pc) / pc),)

    return record(out, (p,), backward)


# -- reductions -----------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _out(a.data.sum(axis=axis, keepdims=keepdims), "sum")
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _out(a.data.mean(axis=axis, keepdims=keepdims), "mean")
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record(out, (a,), backward)


# -- shape manipulation ------------------------------------------------------------

def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape))
    old = a.data.shape
    return record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return record(out, (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _out(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return record(out, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index])
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return record(out, (a,), backward)


def stop_gradient(a) -> Tensor:
    """Forward identity that blocks all gradient flow."""
    a = as_tensor(a)
    return Tensor(a.data)


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeMismatch("matmul requires arrays of rank >= 1")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = _out(a.data @ b.data, "matmul")
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_data.shape)
        return ga, gb

    return record(out, (a, b), backward)


# -- normalization / attention ------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y, "softmax")

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record(out, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    if gain.data.shape != x.shape[-1:] or bias.data.shape != x.shape[-1:]:
        raise ShapeMismatch("layer_norm gain/bias must match the last axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(xhat * gain.data + bias.data, "layer_norm")
    g_data = gain.data

    def backward(g):
        ga = gg = gb = None
        dxhat = g * g_data
        if a.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            ga = inv * (dxhat - m1 - xhat * m2)
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return ga, gg, gb

    return record(out, (a, gain, bias), backward)


# -- embeddings / losses --------------------------------------------------------------

def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a (V, E) table by an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeMismatch("embedding ids must be integers")
    if table.data.ndim != 2:
        raise ShapeMismatch("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexOutOfRange("embedding id outside the table")
    out = Tensor(table.data[ids])
    shape = table.data.shape

    def backward(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (grad,)

    return record(out, (table,), backward)


def cross_entropy_with_logits(logits, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer targets under row softmax.

    ``mask`` weights positions; with ``reduction="mean"`` the loss is the
    masked sum divided by max(total weight, 1), so a fully masked batch
    yields exactly 0 with zero gradients.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    x = logits.data
    if x.ndim != 2:
        raise ShapeMismatch("cross_entropy expects (N, V) logits")
    if targets.shape != x.shape[:1]:
        raise ShapeMismatch("targets must be shaped (N,)")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
        raise IndexOutOfRange("target id outside the vocabulary")
    if reduction not in ("mean", "sum"):
        raise ShapeMismatch(f"unknown reduction {reduction!r}")
    n = x.shape[0]
    w = np.ones(n, dtype=x.dtype) if mask is None else np.asarray(mask, dtype=x.dtype)
    if w.shape != (n,):
        raise ShapeMismatch("mask must be shaped (N,)")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    nll = lse - x[np.arange(n), targets]
    denom = 1.0 if reduction == "sum" else max(float(w.sum()), 1.0)
    out = _out((nll * w).sum() / denom, "cross_entropy_with_logits")

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (p * (w * (float(g) / denom))[:, None],)

    return record(out, (logits,), backward)


# -- convolutions ------------------------------------------------------------------------

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    """Patch matrix (B*Ho*Wo, kh*kw*C) from padded channels-last input."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    view = view[:, ::sh, ::sw]  # (B, Ho, Wo, C, kh, kw)
    hout, wout = view.shape[1], view.shape[2]
    cols = np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(xp.shape[0] * hout * wout, -1), hout, wout


def conv2d(x, w, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation, channels last: (B, H, W, C) with (kh, kw, C, Cout).

    One im2col GEMM per direction; the patch matrix is rebuilt in backward
    instead of being saved, trading a gather for memory.
    """
    x, w = as_tensor(x), as_tensor(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and weight")
    b, h, wd, c = x.data.shape
    kh, kw, cin, cout = w.data.shape
    if cin != c:
        raise ShapeMismatch(f"conv2d channels: input {c}, weight {cin}")
    hout = (h + 2 * ph - kh) // sh + 1
    wout = (wd + 2 * pw - kw) // sw + 1
    if hout < 1 or wout < 1:
        raise ShapeMismatch("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    wmat = w.data.reshape(-1, cout)
    cols, _, _ = _im2col(xp, kh, kw, sh, sw)
    out = _out((cols @ wmat).reshape(b, hout, wout, cout), "conv2d")

    def backward(g):
        gx = gw = None
        gflat = g.reshape(-1, cout)
        if w.requires_grad:
            rebuilt, _, _ = _im2col(xp, kh, kw, sh, sw)
            gw = (rebuilt.T @ gflat).reshape(w.data.shape)
        if x.requires_grad:
            # dx = correlation of the stride-dilated output gradient with the
            # spatially flipped, channel-swapped kernel (needs ph < kh, pw < kw,
            # which holds for any kernel that can see its own padding)
            if sh == 1 and sw == 1:
                gd = g
            else:
                gd = np.zeros((b, (hout - 1) * sh + 1, (wout - 1) * sw + 1, cout),
                              dtype=g.dtype)
                gd[:, ::sh, ::sw] = g
            pad_h = (kh - 1 - ph, h + ph - gd.shape[1])
            pad_w = (kw - 1 - pw, wd + pw - gd.shape[2])
            gp = np.pad(gd, ((0, 0), pad_h, pad_w, (0, 0)))
            cols_g, _, _ = _im2col(gp, kh, kw, 1, 1)
            wflip = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(-1, c)
            gx = (cols_g @ wflip).reshape(b, h, wd, c)
        return gx, gw

    return record(out, (x, w), backward)


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation, channels last: (B, T, C) with (k, C, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatch("conv1d expects 3-D input and weight")
    b, t, c = x.data.shape
    k, cin, cout = w.data.shape
    tout = (t + 2 * padding - k) // stride + 1
    y = conv2d(reshape(x, (b, t, 1, c)), reshape(w, (k, 1, cin, cout)),
               stride=(stride, 1), padding=(padding, 0))
    return reshape(y, (b, tout, cout))


def nearest_upsample2x(x, axis: int = 1) -> Tensor:
    """Repeat each entry twice along ``axis`` (time, in channels-last layouts)."""
    x = as_tensor(x)
    if x.data.ndim <= axis:
        raise ShapeMismatch("nearest_upsample2x axis out of range")
    out = Tensor(np.repeat(x.data, 2, axis=axis))

    def backward(g):
        even = [slice(None)] * g.ndim
        odd = [slice(None)] * g.ndim
        even[axis] = slice(0, None, 2)
        odd[axis] = slice(1, None, 2)
        return (g[tuple(even)] + g[tuple(odd)],)

    return record(out, (x,), backward)


# operator table for Tensor method sugar
for _name, _fn in [
    ("add", add), ("sub", sub), ("mul", mul), ("div", div), ("neg", neg),
    ("pow", pow_), ("matmul", matmul), ("sum", sum_), ("mean", mean),
    ("reshape", reshape), ("transpose", transpose),
]:
    register_op(_name, _fn)
