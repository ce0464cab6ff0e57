"""A small float64 reverse-mode autodiff library on top of numpy."""
from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, state_digest
from .nn import MLP, Conv1d, LayerNorm, Linear, Module, MultiHeadSelfAttention, Parameter, ResBlock1d
from .optim import AdamW, adamw_step, cosine_lr
from .tensor import GradientError, ShapeError, Tensor, grad_enabled, no_grad, tensor

__all__ = [
    "AdamW",
    "CheckpointError",
    "Conv1d",
    "GradientError",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadSelfAttention",
    "Parameter",
    "ResBlock1d",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "cosine_lr",
    "grad_enabled",
    "load_checkpoint",
    "no_grad",
    "ops",
    "save_checkpoint",
    "state_digest",
    "tensor",
]
