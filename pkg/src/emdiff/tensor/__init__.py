"""Minimal tensor engine: autodiff, the score MLP, AdamW and EMA."""

from .engine import (
    AutodiffError,
    NonFiniteError,
    Tensor,
    concat,
    grad,
    linear_map,
    no_grad,
    stack,
    tensor,
)
from .nn import MlpConfig, MlpScoreNet, forward_mlp, sinusoidal_embedding
from .optim import AdamW, EmaState, OptimizerState, adamw_step, ema_init, ema_update, warmup_decay

__all__ = [
    "AdamW",
    "AutodiffError",
    "EmaState",
    "MlpConfig",
    "MlpScoreNet",
    "NonFiniteError",
    "OptimizerState",
    "Tensor",
    "adamw_step",
    "concat",
    "ema_init",
    "ema_update",
    "forward_mlp",
    "grad",
    "linear_map",
    "no_grad",
    "sinusoidal_embedding",
    "stack",
    "tensor",
    "warmup_decay",
]
