"""Reverse-time sampling with an optional, lambda-weighted likelihood term.

The reverse update at step ``t`` is

    x_{t-1} = x_t + beta_t * (x_t / 2 + s(x_t, t) + lam * g(x_t, t)) + sqrt(beta_t) * z

where ``g = -(1 / 2 sigma^2) grad_{x_t} ||y - A(x0_hat(x_t))||^2`` and
``x0_hat`` is Tweedie's estimate. ``z`` is zero on the final step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .forward_ops import ForwardOperator, OperatorBatch, batch_operators
from .schedule import NoiseSchedule
from .score_models import ScoreModel
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

ALPHA_BAR_FLOOR = 1e-8


class SamplerDivergence(RuntimeError):
    """Every chain of a sampling run blew up."""


@dataclass
class SamplerConfig:
    schedule: NoiseSchedule
    lam: float = 1.0
    sigma: float = 0.01
    steps: int | None = None
    seed: int = 0
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive for posterior sampling")
        if self.steps is not None and not 1 <= self.steps <= self.schedule.T:
            raise ValueError(f"steps must lie in [1, {self.schedule.T}]")

    def replace(self, **kw) -> "SamplerConfig":
        d = dict(schedule=self.schedule, lam=self.lam, sigma=self.sigma, steps=self.steps,
                 seed=self.seed, divergence_threshold=self.divergence_threshold)
        d.update(kw)
        return SamplerConfig(**d)


@dataclass
class SampleResult:
    x0: np.ndarray
    data_loss: np.ndarray | None
    diverged: np.ndarray
    lam: float

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    def mean_data_loss(self) -> float:
        if self.data_loss is None:
            return float("nan")
        ok = ~self.diverged
        return float(np.mean(self.data_loss[ok])) if ok.any() else float("inf")


@dataclass
class LambdaSearchResult:
    grid: list
    losses: list
    lambda_star: float
    diverged_fraction: list = field(default_factory=list)
    valid: list = field(default_factory=list)


def timestep_plan(schedule: NoiseSchedule, steps: int | None = None) -> list[tuple[int, float]]:
    """Descending ``(t, beta_eff)`` pairs.

    With ``steps`` below ``T`` the timesteps are evenly spaced and each
    ``beta_eff = 1 - ab_t / ab_prev`` so the cumulative noise level matches.
    """
    T = schedule.T
    if steps is None or steps == T:
        return [(t, float(schedule.beta[t - 1])) for t in range(T, 0, -1)]
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    plan = []
    for i in range(len(ts) - 1, -1, -1):
        t = int(ts[i])
        ab = schedule.alpha_bar[t - 1]
        ab_prev = schedule.alpha_bar[ts[i - 1] - 1] if i > 0 else 1.0
        plan.append((t, float(1.0 - ab / ab_prev)))
    return plan


# ---------------------------------------------------------------- tweedie

def tweedie_x0(model: ScoreModel, x_t: np.ndarray, t: int, schedule: NoiseSchedule | None = None,
               score: np.ndarray | None = None) -> np.ndarray:
    """Posterior-mean estimate ``(x_t + (1 - ab_t) s(x_t, t)) / sqrt(ab_t)``."""
    schedule = schedule or model.schedule
    ab = max(float(schedule.alpha_bar_at(t)), ALPHA_BAR_FLOOR)
    s = model.score(x_t, t) if score is None else score
    return (x_t + (1.0 - ab) * s) / np.sqrt(ab)


def tweedie_x0_tensor(model: ScoreModel, x_t: Tensor, t: int) -> tuple[Tensor, Tensor]:
    """Tweedie estimate on the tape; also returns the ``(1 - ab) * score`` tensor."""
    ab = max(float(model.schedule.alpha_bar_at(t)), ALPHA_BAR_FLOOR)
    scaled = model.scaled_score_tensor(x_t, t)
    return (x_t + scaled) * (1.0 / np.sqrt(ab)), scaled


# ------------------------------------------------------------- likelihood

def _likelihood_grad(model: ScoreModel, x_t: np.ndarray, t: int, batch: OperatorBatch,
                     sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(likelihood score, prior score)`` from one forward/backward pass."""
    x = Tensor(x_t, requires_grad=True, dtype=x_t.dtype if x_t.dtype == np.float64 else None)
    x0, scaled = tweedie_x0_tensor(model, x, t)
    resid = batch.apply_tensor(x0) - Tensor(batch.y.astype(x.dtype), dtype=x.dtype)
    loss = (resid * resid).sum() * (-0.5 / sigma ** 2)
    loss.backward()
    ab = float(model.schedule.alpha_bar_at(t))
    prior = scaled.data / np.asarray(1.0 - ab, dtype=scaled.data.dtype)
    return x.grad, prior


def posterior_likelihood_score(model: ScoreModel, x_t: np.ndarray, t: int, y,
                               op: ForwardOperator | Sequence[ForwardOperator] | OperatorBatch,
                               sigma: float) -> np.ndarray:
    """``-(1 / 2 sigma^2) grad_{x_t} ||y - A(x0_hat(x_t))||^2``, row by row.

    The gradient flows through Tweedie's estimate, including the score
    model's Jacobian.
    """
    batch = _as_batch(op, y, len(x_t))
    g, _ = _likelihood_grad(model, np.asarray(x_t), t, batch, sigma)
    return g


def _as_batch(op, y, n) -> OperatorBatch:
    if isinstance(op, OperatorBatch):
        return op
    if isinstance(op, ForwardOperator):
        y = np.asarray(y)
        ys = list(y) if y.ndim == 2 else [y] * n
        return batch_operators([op] * len(ys), ys)
    return batch_operators(list(op), list(y))


# ------------------------------------------------------------------- step

def reverse_step(model: ScoreModel, x_t: np.ndarray, t: int, z: np.ndarray | None,
                 config: SamplerConfig, likelihood: np.ndarray | None = None,
                 score: np.ndarray | None = None, beta: float | None = None) -> np.ndarray:
    """One reverse update from ``t`` to ``t - 1``; ``z`` is ignored at ``t == 1``."""
    if t < 1:
        raise IndexError("t must be >= 1")
    b = float(model.schedule.beta_at(t)) if beta is None else beta
    s = model.score(x_t, t) if score is None else score
    drift = 0.5 * x_t + s
    if likelihood is not None and config.lam != 0:
        drift = drift + np.float32(config.lam) * likelihood
    out = x_t + np.float32(b) * drift
    if t > 1 and z is not None:
        out = out + np.float32(np.sqrt(b)) * z
    return out.astype(x_t.dtype, copy=False)


# ------------------------------------------------------------------ chains

def _run(model: ScoreModel, n: int, config: SamplerConfig, rng: np.random.Generator,
         batch: OperatorBatch | None) -> SampleResult:
    d = model.dim
    x = rng.standard_normal((n, d), dtype=np.float32)
    diverged = np.zeros(n, dtype=bool)
    use_lik = batch is not None and config.lam != 0
    for t, b in timestep_plan(model.schedule, config.steps):
        z = rng.standard_normal((n, d), dtype=np.float32)
        if use_lik:
            lik, s = _likelihood_grad(model, x, t, batch, config.sigma)
        else:
            lik, s = None, model.score(x, t)
        x = reverse_step(model, x, t, z, config, likelihood=lik, score=s, beta=b)
        norms = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=1))
        bad = ~np.isfinite(norms) | (norms > config.divergence_threshold)
        if bad.any():
            new = bad & ~diverged
            if new.any():
                log.debug("t=%d: %d chain(s) diverged (max norm %.3g)", t, int(new.sum()),
                            float(np.nanmax(np.where(np.isfinite(norms), norms, np.nan),
                                            initial=0.0)))
            diverged |= bad
            x[diverged] = 0.0
    if diverged.any():
        x[diverged] = 0.0
        log.warning("%d of %d chain(s) diverged", int(diverged.sum()), n)
    loss = batch.residual_norms(x) if batch is not None else None
    if loss is not None:
        loss[diverged] = np.nan
    return SampleResult(x, loss, diverged, config.lam)


def sample_unconditional(model: ScoreModel, n: int, config: SamplerConfig,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return _run(model, n, config, rng, None).x0


def sample_posterior(model: ScoreModel, y, op, config: SamplerConfig,
                     rng: np.random.Generator | None = None) -> SampleResult:
    """One posterior draw per observation row of ``y``.

    ``op`` may be a single operator shared by all rows, a list with one
    operator per row, or a prebuilt :class:`OperatorBatch`.
    """
    batch = _as_batch(op, y, len(y) if not isinstance(op, OperatorBatch) else len(op.y))
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    try:
        res = _run(model, len(batch.y), config, rng, batch)
    except NonFiniteError as exc:
        raise SamplerDivergence(f"non-finite state during sampling: {exc}") from exc
    return res


def select_lambda(model: ScoreModel, batch: OperatorBatch, grid: Sequence[float],
                  config: SamplerConfig, max_diverged_frac: float = 1.0) -> LambdaSearchResult:
    """Pick the lambda minimizing mean ``||y - A(x0_lambda)||^2`` over ``batch``.

    Every candidate reuses ``config.seed`` so the comparison is on common
    random numbers. Ties go to the smaller lambda. A candidate is invalid
    when all of its chains diverge, or when the diverged fraction exceeds
    ``max_diverged_frac``.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    if len(set(grid)) != len(grid):
        raise ValueError("lambda grid has repeated values")
    if any(g < 0 for g in grid):
        raise ValueError("lambda values must be nonnegative")
    losses, fracs, valid = [], [], []
    for lam in grid:
        try:
            res = sample_posterior(model, None, batch, config.replace(lam=lam))
            frac = res.n_diverged / len(res.diverged)
            ok = res.n_diverged < len(res.diverged) and frac <= max_diverged_frac
            loss = res.mean_data_loss() if ok else float("inf")
        except SamplerDivergence:
            ok, loss, frac = False, float("inf"), 1.0
        losses.append(loss)
        fracs.append(frac)
        valid.append(ok)
        log.info("lambda=%g mean data loss %.6g (diverged %.0f%%)", lam, loss, 100 * frac)
    if not any(valid):
        raise SamplerDivergence("every lambda candidate diverged")
    best = pick_lambda(grid, losses, valid)
    return LambdaSearchResult(grid, losses, best, fracs, valid)


def pick_lambda(grid: Sequence[float], losses: Sequence[float], valid: Sequence[bool] | None = None) -> float:
    """Argmin of ``losses`` over valid candidates; ties break toward smaller lambda."""
    valid = valid if valid is not None else [True] * len(grid)
    best, best_loss = None, None
    for lam, loss, ok in sorted(zip(grid, losses, valid), key=lambda p: p[0]):
        if not ok or not np.isfinite(loss):
            continue
        if best_loss is None or loss < best_loss:
            best, best_loss = lam, loss
    if best is None:
        raise SamplerDivergence("no valid lambda candidate")
    return best
