"""Minimal dense tensors with reverse-mode differentiation and training machinery."""

from fastar_lab.diffcore.autodiff import forward_backward, grad_check, relative_error
from fastar_lab.diffcore.optim import (
    EmaState,
    OptimState,
    adamw_step,
    clip_global_norm,
    default_decay_exempt,
    ema_update,
    global_norm,
    lr_at,
)
from fastar_lab.diffcore.rng import RngStreams
from fastar_lab.diffcore.tensor import DEFAULT_DTYPE, Graph, Node, Tensor, as_tensor

__all__ = [
    "DEFAULT_DTYPE",
    "EmaState",
    "Graph",
    "Node",
    "OptimState",
    "RngStreams",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "clip_global_norm",
    "default_decay_exempt",
    "ema_update",
    "forward_backward",
    "global_norm",
    "grad_check",
    "lr_at",
    "relative_error",
]
