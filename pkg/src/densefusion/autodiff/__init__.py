"""Minimal reverse-mode automatic differentiation over numpy arrays."""
from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import AdamState, adam_step, collect_grads, sgd_step, zero_grads
from .tensor import Tape, Tensor, active_tape, backward

__all__ = [
    "ops", "Tensor", "Tape", "backward", "active_tape",
    "sgd_step", "adam_step", "AdamState", "collect_grads", "zero_grads",
    "save_checkpoint", "load_checkpoint",
    "check_gradients", "numerical_grad", "relative_error",
]
