"""AdamW with decoupled weight decay, and parameter EMA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import _kernels
from .engine import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> "OptimizerState":
        st = cls(**kwargs)
        st.m = [np.zeros(np.shape(p), np.float32) for p in params]
        st.v = [np.zeros(np.shape(p), np.float32) for p in params]
        return st


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
               state: OptimizerState) -> None:
    """One AdamW update applied in place to ``params``.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` precedes the Adam
    move. Missing gradients count as zero.
    """
    if state.lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.betas
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not (p.flags.c_contiguous and p.dtype == np.float32):
            raise ValueError("parameters must be contiguous float32 buffers")
        g = np.ascontiguousarray(g, dtype=np.float32)
        _kernels.adamw_update(p, g, m, v, state.lr, b1, b2, state.eps,
                              state.weight_decay, bias1, bias2)


class AdamW:
    """Optimizer over a list of leaf tensors; reads ``.grad`` on each step."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState.for_params([p.data for p in self.params], lr=lr,
                                               betas=tuple(betas), eps=eps,
                                               weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


@dataclass
class EmaState:
    decay: float
    shadow: list
    updates: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("EMA decay must lie in (0, 1)")


def ema_init(params: Sequence[np.ndarray], decay: float = 0.999) -> EmaState:
    return EmaState(decay, [np.array(p, dtype=np.float32, copy=True) for p in params])


def ema_update(ema: EmaState, params: Sequence[np.ndarray], decay: float | None = None) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * params`` elementwise, in place.

    ``decay`` overrides the stored factor for this call only (used for warmup).
    """
    d = ema.decay if decay is None else decay
    if len(params) != len(ema.shadow):
        raise ValueError("parameter count differs from EMA shadow")
    for s, p in zip(ema.shadow, params):
        if s.shape != np.shape(p):
            raise ValueError(f"shape mismatch {s.shape} vs {np.shape(p)}")
        _kernels.ema_update(s, np.ascontiguousarray(p, dtype=np.float32), d)
    ema.updates += 1
    return ema


def warmup_decay(decay: float, updates: int) -> float:
    """Effective decay ``min(decay, (1 + n) / (10 + n))`` after ``n`` updates."""
    return min(decay, (1.0 + updates) / (10.0 + updates))
