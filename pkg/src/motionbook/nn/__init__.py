"""Minimal reverse-mode autodiff engine, optimizer, and checkpoint IO."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import Tape, Tensor, as_tensor
from .gradcheck import grad_check
from .layers import Conv1d, Conv2d, LayerNorm, Linear
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "Conv1d", "Conv2d", "LayerNorm", "Linear",
    "Tape", "Tensor", "adam_step", "as_tensor", "grad_check",
    "load_checkpoint", "ops", "save_checkpoint",
]
