"""Thin parameter-holding layers built on the op set."""

from __future__ import annotations

import numpy as np

from . import ops
from .engine import Tensor


def _init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    scale = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, zero_init: bool = False):
        if zero_init:
            self.w = Tensor(np.zeros((d_in, d_out), dtype=np.float32), requires_grad=True)
        else:
            self.w = _init(rng, (d_in, d_out), d_in)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ops.add(ops.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Conv2d:
    """Channels-last conv: input (B, H, W, C), weight (kh, kw, C, Cout)."""

    def __init__(self, rng, c_in: int, c_out: int, kernel=(3, 3), stride=(1, 1), padding=(1, 1)):
        kh, kw = kernel
        self.w = _init(rng, (kh, kw, c_in, c_out), c_in * kh * kw)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.add(ops.conv2d(x, self.w, stride=self.stride, padding=self.padding), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Conv1d:
    """Channels-last conv: input (B, T, C), weight (k, C, Cout)."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int = 1):
        self.w = _init(rng, (kernel, c_in, c_out), c_in * kernel)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.add(ops.conv1d(x, self.w, stride=self.stride, padding=self.padding), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, width: int):
        self.g = Tensor(np.ones(width, dtype=np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ops.layer_norm(x, self.g, self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}
