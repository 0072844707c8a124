"""Time-dependent score functions behind one interface.

Every model answers ``score(x, t)`` (arrays in, arrays out) and, where the
sampler needs gradients through Tweedie's estimate, ``score_tensor(x, t)``
on the autodiff engine.

Variants
--------
NeuralScore
    Wraps an :class:`~emdiff.tensor.MlpScoreNet` whose output ``o`` is
    trained toward ``-eps``; the score is ``o / sqrt(1 - alpha_bar_t)``.
GaussianScore, GmmScore
    Closed-form scores of a Gaussian / Gaussian-mixture prior pushed through
    the forward kernel ``x_t | x_0 ~ N(sqrt(ab) x_0, (1 - ab) I)``.
GridScore
    Brute-force score of an arbitrary tabulated 1-D or 2-D density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule
from .tensor import MlpScoreNet, NonFiniteError, Tensor, forward_mlp, no_grad


class ScoreModel:
    kind: str = "abstract"
    dim: int
    schedule: NoiseSchedule

    def score(self, x: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def score_tensor(self, x: Tensor, t: int) -> Tensor:
        raise NotImplementedError(f"{self.kind} score is not differentiable")

    def scaled_score_tensor(self, x: Tensor, t: int) -> Tensor:
        """``(1 - ab_t) * score`` as a tensor (the term entering Tweedie)."""
        ab = float(self.schedule.alpha_bar_at(t))
        return self.score_tensor(x, t) * (1.0 - ab)


def eval_score(model: ScoreModel, x: np.ndarray, t: int) -> np.ndarray:
    """Evaluate ``model`` on a batch ``(batch, d)`` with shape and finiteness checks."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"expected (batch, {model.dim}) input, got {x.shape}")
    if not 1 <= int(t) <= model.schedule.T:
        raise IndexError(f"timestep {t} outside [1, {model.schedule.T}]")
    s = model.score(x, int(t))
    if not np.isfinite(s).all():
        raise NonFiniteError(f"{model.kind} score not finite at t={t}")
    return s


# ----------------------------------------------------------------- neural

class NeuralScore(ScoreModel):
    kind = "neural"

    def __init__(self, net: MlpScoreNet, schedule: NoiseSchedule):
        self.net = net
        self.schedule = schedule
        self.dim = net.config.data_dim

    def _noise_scale(self, t) -> float:
        return float(np.sqrt(1.0 - self.schedule.alpha_bar_at(t)))

    def score(self, x, t):
        with no_grad():
            out = forward_mlp(self.net, Tensor(np.asarray(x, dtype=np.float32)), t).data
        return out / np.float32(self._noise_scale(t))

    def score_tensor(self, x, t):
        return forward_mlp(self.net, x, t) * (1.0 / self._noise_scale(t))

    def scaled_score_tensor(self, x, t):
        # (1 - ab) * o / sqrt(1 - ab) == sqrt(1 - ab) * o
        return forward_mlp(self.net, x, t) * self._noise_scale(t)


# --------------------------------------------------------------- gaussian

def _spd_check(cov: np.ndarray, what: str) -> None:
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ValueError(f"{what} covariance must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{what} covariance is not positive definite") from exc


@dataclass
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean and covariance dimensions differ")
        _spd_check(self.cov, "prior")

    @property
    def dim(self) -> int:
        return self.mean.size

    def diffused(self, schedule: NoiseSchedule, t) -> tuple[np.ndarray, np.ndarray]:
        ab = float(schedule.alpha_bar_at(t))
        return np.sqrt(ab) * self.mean, ab * self.cov + (1.0 - ab) * np.eye(self.dim)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=n)


class GaussianScore(ScoreModel):
    kind = "gaussian"

    def __init__(self, prior: GaussianPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self.dim = prior.dim
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _terms(self, t: int):
        if t not in self._cache:
            m, c = self.prior.diffused(self.schedule, t)
            self._cache[t] = (m, np.linalg.inv(c))
        return self._cache[t]

    def score(self, x, t):
        m, prec = self._terms(int(t))
        x = np.asarray(x)
        s = -(x.astype(np.float64) - m) @ prec
        return s.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float64)

    def score_tensor(self, x, t):
        m, prec = self._terms(int(t))
        return (x - m.astype(x.dtype)) @ Tensor((-prec).astype(x.dtype), dtype=x.dtype)


# -------------------------------------------------------------------- gmm

@dataclass
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64)
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covs.shape != (k, d, d):
            raise ValueError("inconsistent GMM component shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("GMM weights must be nonnegative and sum to 1")
        for c in self.covs:
            _spd_check(c, "component")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def diffused(self, schedule: NoiseSchedule, t) -> "GmmPrior":
        ab = float(schedule.alpha_bar_at(t))
        covs = ab * self.covs + (1.0 - ab) * np.eye(self.dim)[None]
        return GmmPrior(self.weights, np.sqrt(ab) * self.means, covs)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log of the explicitly summed mixture density at rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        terms = []
        for w, m, c in zip(self.weights, self.means, self.covs):
            diff = x - m
            sol = np.linalg.solve(c, diff.T).T
            _, logdet = np.linalg.slogdet(c)
            quad = np.sum(diff * sol, axis=1)
            terms.append(np.log(w) - 0.5 * (quad + logdet + self.dim * np.log(2 * np.pi))
                         if w > 0 else np.full(len(x), -np.inf))
        return logsumexp(np.stack(terms, axis=1), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chol = np.linalg.cholesky(self.covs)
        x = self.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)
        return x, labels


class GmmScore(ScoreModel):
    kind = "gmm"

    def __init__(self, prior: GmmPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self.dim = prior.dim
        self._cache: dict[int, tuple] = {}

    def _terms(self, t: int):
        if t not in self._cache:
            dp = self.prior.diffused(self.schedule, t)
            precs = np.linalg.inv(dp.covs)
            logdets = np.linalg.slogdet(dp.covs)[1]
            with np.errstate(divide="ignore"):
                logw = np.log(dp.weights)
            self._cache[t] = (dp.means, precs, logw - 0.5 * logdets)
        return self._cache[t]

    def score(self, x, t):
        means, precs, base = self._terms(int(t))
        x = np.asarray(x)
        x64 = x.astype(np.float64)
        proj = np.einsum("nd,kde->nke", x64, precs) - np.einsum("kd,kde->ke", means, precs)[None]
        diff = x64[:, None, :] - means[None]
        logits = base[None] - 0.5 * np.sum(diff * proj, axis=2)
        logits -= logits.max(axis=1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=1, keepdims=True)
        s = -np.einsum("nk,nkd->nd", r, proj)
        return s.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float64)

    def score_tensor(self, x, t):
        from .tensor import concat

        means, precs, base = self._terms(int(t))
        dt = x.dtype
        projs, logits = [], []
        for k in range(len(means)):
            diff = x - means[k].astype(dt)
            p = diff @ Tensor(precs[k].astype(dt), dtype=dt)
            projs.append(p)
            logits.append((diff * p).sum(axis=1, keepdims=True) * -0.5 + float(base[k]))
        r = concat(logits, axis=1).softmax(axis=1)
        out = None
        for k, p in enumerate(projs):
            term = r[:, k:k + 1] * p
            out = term if out is None else out + term
        return -out


# ------------------------------------------------------------------- grid

class GridScore(ScoreModel):
    """Score of a tabulated density diffused by brute-force summation.

    ``axes`` holds one 1-D coordinate array per dimension (uniform spacing);
    ``density`` has shape ``[len(a) for a in axes]`` and integrates to one
    on the grid.
    """

    kind = "grid"

    def __init__(self, axes, density, schedule: NoiseSchedule, step: float | None = None):
        self.axes = [np.asarray(a, dtype=np.float64) for a in axes]
        self.dim = len(self.axes)
        if self.dim not in (1, 2):
            raise ValueError("grid scores support 1-D and 2-D densities")
        density = np.asarray(density, dtype=np.float64)
        if density.shape != tuple(len(a) for a in self.axes):
            raise ValueError("density shape does not match the grid axes")
        self.h = [float(a[1] - a[0]) if len(a) > 1 else 1.0 for a in self.axes]
        self.cell = float(np.prod(self.h))
        mass = density.sum() * self.cell
        if not np.isclose(mass, 1.0, rtol=1e-6):
            raise ValueError(f"density must be normalized on the grid (mass {mass:.6g})")
        self.schedule = schedule
        self.step = step if step is not None else min(self.h)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.stack([m.ravel() for m in mesh], axis=1)
        self.weights = density.ravel() * self.cell
        keep = self.weights > 0
        self.points, self.weights = self.points[keep], self.weights[keep]
        self.lo = np.array([a[0] for a in self.axes])
        self.hi = np.array([a[-1] for a in self.axes])

    def log_density(self, x: np.ndarray, t: int) -> np.ndarray:
        """``log p_t`` at rows of ``x`` by explicit kernel summation."""
        ab = float(self.schedule.alpha_bar_at(t))
        var = 1.0 - ab
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        centers = np.sqrt(ab) * self.points
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        norm = -0.5 * self.dim * np.log(2 * np.pi * var)
        return logsumexp(-0.5 * d2 / var, b=self.weights[None], axis=1) + norm

    def score(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if np.any(x < self.lo) or np.any(x > self.hi):
            raise ValueError("query point outside the tabulated grid")
        out = np.empty_like(x)
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = self.step
            out[:, k] = (self.log_density(x + e, t) - self.log_density(x - e, t)) / (2 * self.step)
        return out


def grid_score(axes, density, schedule: NoiseSchedule, x, t) -> np.ndarray:
    return GridScore(axes, density, schedule).score(x, t)
