"""Synthetic datasets, reconstruction metrics and analytic posterior oracles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward_ops import ForwardOperator
from .score_models import GaussianPrior, GmmPrior

TOY_FAMILIES = ("bars", "blobs", "background")


@dataclass
class Dataset:
    samples: np.ndarray
    kind: str
    spec: dict
    seed: int
    split: str = "train"
    image_shape: tuple | None = None
    indices: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def take(self, idx, split: str) -> "Dataset":
        idx = np.asarray(idx)
        base = self.indices if self.indices is not None else np.arange(len(self))
        return Dataset(self.samples[idx], self.kind, self.spec, self.seed, split,
                       self.image_shape, base[idx],
                       None if self.labels is None else self.labels[idx])


def split_dataset(ds: Dataset, sizes: dict, seed: int) -> dict:
    """Disjoint random splits, e.g. ``{"init": 50, "train": 5000, "test": 500}``."""
    total = sum(sizes.values())
    if total > len(ds):
        raise ValueError(f"splits need {total} samples, dataset has {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    out, start = {}, 0
    for name, n in sizes.items():
        out[name] = ds.take(np.sort(perm[start:start + n]), name)
        start += n
    return out


def gen_gmm2d(K: int, means, covs, weights, n: int, seed: int) -> Dataset:
    """``n`` i.i.d. draws from a ``K``-component Gaussian mixture."""
    prior = GmmPrior(weights, means, covs)
    if prior.n_components != K:
        raise ValueError(f"K={K} but {prior.n_components} components given")
    rng = np.random.default_rng(seed)
    x, labels = prior.sample(n, rng)
    spec = {"K": K, "means": prior.means.tolist(), "covs": prior.covs.tolist(),
            "weights": prior.weights.tolist(), "n": n}
    return Dataset(x.astype(np.float32), "gmm2d", spec, seed, labels=labels)


def _bars(h, w, n, rng):
    imgs = np.zeros((n, h, w), dtype=np.float64)
    vertical = rng.random(n) < 0.5
    amp = rng.uniform(0.5, 1.0, size=n)
    for i in range(n):
        if vertical[i]:
            c = rng.integers(0, w - 1)
            imgs[i, :, c:c + 2] = amp[i]
        else:
            r = rng.integers(0, h - 1)
            imgs[i, r:r + 2, :] = amp[i]
    return imgs


def _blobs(h, w, n, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    cy = rng.uniform(1.5, h - 2.5, size=n)
    cx = rng.uniform(1.5, w - 2.5, size=n)
    s = rng.uniform(0.8, 1.5, size=n)
    amp = rng.uniform(0.5, 1.0, size=n)
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    return amp[:, None, None] * np.exp(-d2 / (2 * s[:, None, None] ** 2))


def bar_coverage_fraction(h: int, w: int) -> float:
    """Expected fraction of nonzero pixels in a ``bars`` image (width-2 bars)."""
    return 0.5 * (2.0 / w) + 0.5 * (2.0 / h)


def gen_toyimages(h: int, w: int, shape_family: str, n: int, seed: int,
                  background: float = 0.0) -> Dataset:
    """Procedural ``h x w`` images in ``[0, 1]``, one shape per image, flattened.

    ``bars``: a horizontal or vertical bar two pixels thick at a random
    offset, intensity ``U(0.5, 1)``. ``blobs``: an isotropic Gaussian bump
    with random centre, width and height. ``background``: constant images.
    """
    if h < 4 or w < 4:
        raise ValueError("toy images must be at least 4x4")
    if shape_family not in TOY_FAMILIES:
        raise ValueError(f"unknown shape family {shape_family!r}; choose from {TOY_FAMILIES}")
    rng = np.random.default_rng(seed)
    if shape_family == "bars":
        imgs = _bars(h, w, n, rng)
    elif shape_family == "blobs":
        imgs = _blobs(h, w, n, rng)
    else:
        imgs = np.zeros((n, h, w))
    imgs = np.clip(imgs + background * (imgs == 0), 0.0, 1.0)
    spec = {"h": h, "w": w, "family": shape_family, "n": n, "background": background}
    return Dataset(imgs.reshape(n, h * w).astype(np.float32), "toyimage", spec, seed,
                   image_shape=(h, w))


# ---------------------------------------------------------------- metrics

def psnr(x: np.ndarray, x_ref: np.ndarray, peak: float = 1.0):
    """``10 log10(peak^2 / MSE)`` per row (or scalar for 1-D input); ``inf`` when MSE is 0."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_ref.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((x - x_ref) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak ** 2 / mse)
    return float(out) if np.ndim(out) == 0 else out


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_projections: int = 128, seed: int = 0) -> float:
    """Mean over random unit directions of the 1-D W2 distance between projections.

    The larger set is subsampled (without replacement) to the smaller size.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ValueError("sets must have positive dimension")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sets differ in dimension")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sets must be nonempty")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    m = min(len(a), len(b))
    if len(a) > m:
        a = a[rng.choice(len(a), m, replace=False)]
    elif len(b) > m:
        b = b[rng.choice(len(b), m, replace=False)]
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


@dataclass
class MetricReport:
    psnr: np.ndarray
    psnr_mean: float
    swd: float
    data_loss_mean: float = float("nan")
    extra: dict = field(default_factory=dict)


def evaluate(recon: np.ndarray, reference: np.ndarray, n_projections: int = 128, seed: int = 0,
             data_loss: np.ndarray | None = None) -> MetricReport:
    p = psnr(recon, reference)
    return MetricReport(np.atleast_1d(p), float(np.mean(p)),
                        sliced_wasserstein(recon, reference, n_projections, seed),
                        float(np.mean(data_loss)) if data_loss is not None else float("nan"))


# ---------------------------------------------------------------- oracles

def gaussian_posterior_oracle(prior: GaussianPrior, op: ForwardOperator, y: np.ndarray,
                              sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior ``N(mu_p, Sigma_p)`` for ``y = A x + sigma n`` under a Gaussian prior."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    A = op.matrix()
    prec0 = np.linalg.inv(prior.cov)
    prec = prec0 + A.T @ A / sigma ** 2
    try:
        cov = np.linalg.inv(prec)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("posterior precision is singular") from exc
    mean = cov @ (prec0 @ prior.mean + A.T @ np.asarray(y, dtype=np.float64) / sigma ** 2)
    return mean, 0.5 * (cov + cov.T)
