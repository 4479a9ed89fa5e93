"""Minimal dense tensors with reverse-mode differentiation."""
from . import functional
from .checkpoint import Checkpoint, file_sha256, load_checkpoint, restore_model, save_checkpoint
from .nn import (GRU, LSTM, BatchNorm1d, Conv1d, Identity, LayerNorm, Linear, Module, ModuleList,
                 Parameter, new_rng)
from .optim import Adam, adam_step
from .tensor import (Tensor, concat, get_default_dtype, is_grad_enabled, no_grad, precision,
                     set_default_dtype, stack, tensor)

__all__ = [
    "functional", "Tensor", "Parameter", "Module", "ModuleList", "Identity", "Linear", "Conv1d",
    "BatchNorm1d", "LayerNorm", "GRU", "LSTM", "Adam", "adam_step", "Checkpoint", "save_checkpoint",
    "load_checkpoint", "restore_model", "file_sha256", "tensor", "concat", "stack", "no_grad",
    "precision", "set_default_dtype", "get_default_dtype", "is_grad_enabled", "new_rng",
]
