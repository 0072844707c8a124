"""Discrete variance-preserving noise schedule and forward diffusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Coefficients ``beta_t`` and ``alpha_bar_t`` for ``t = 1..T``.

    Arrays are stored 0-based (``beta[t - 1]``) in float64; use the accessor
    methods with 1-based timesteps.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta1: float
    betaT: float

    def __post_init__(self):
        if self.beta.shape != (self.T,) or self.alpha_bar.shape != (self.T,):
            raise ValueError("schedule arrays must have length T")

    def _index(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timestep out of range [1, {self.T}]: {t}")
        return t - 1

    def beta_at(self, t):
        return self.beta[self._index(t)]

    def alpha_bar_at(self, t):
        return self.alpha_bar[self._index(t)]

    def coefficients(self, t):
        """``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`` for timestep(s) ``t``."""
        ab = self.alpha_bar_at(t)
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": int(self.T), "beta1": float(self.beta1),
                "betaT": float(self.betaT)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule kind {d.get('kind')!r}")
        return linear_beta_schedule(int(d["T"]), float(d["beta1"]), float(d["betaT"]))

    def __eq__(self, other) -> bool:
        return isinstance(other, NoiseSchedule) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(self.to_dict().items()))


def linear_beta_schedule(T: int = 1000, beta1: float = 1e-4, betaT: float = 0.02) -> NoiseSchedule:
    """Linearly spaced ``beta`` from ``beta1`` to ``betaT`` inclusive."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < beta1 <= betaT < 1.0:
        raise ValueError("need 0 < beta1 <= betaT < 1")
    beta = np.linspace(beta1, betaT, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar, float(beta1), float(betaT))


def forward_diffuse(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``; ``t`` scalar or one per row."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    a, s = schedule.coefficients(t)
    if np.ndim(a):
        a = a.reshape((-1,) + (1,) * (x0.ndim - 1))
        s = s.reshape((-1,) + (1,) * (x0.ndim - 1))
    dtype = x0.dtype if x0.dtype in (np.float32, np.float64) else np.float32
    return (a * x0 + s * eps).astype(dtype, copy=False)
