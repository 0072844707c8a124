"""Independent float64 reimplementations used as test oracles.

Nothing here imports the package's tensor engine; each function is a
straight-line numpy transcription of the quantity it checks.
"""

from __future__ import annotations

import math

import numpy as np


def embed64(t, dim):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    out = np.zeros((len(t), dim))
    for k in range(half):
        f = math.exp(-math.log(10000.0) * k / half)
        out[:, k] = np.sin(t * f)
        out[:, half + k] = np.cos(t * f)
    return out


def mlp64(weights, biases, x, t, time_dim, activation="silu"):
    """Forward pass of the score MLP in float64 with explicit loops over layers."""
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t), (x.shape[0],))
    h = np.concatenate([x, embed64(t, time_dim)], axis=1) if time_dim else x
    n = len(weights)
    for i in range(n):
        h = h @ np.asarray(weights[i], np.float64) + np.asarray(biases[i], np.float64)
        if i < n - 1:
            h = h / (1.0 + np.exp(-h)) if activation == "silu" else np.tanh(h)
    return h


def central_diff(f, x, h=1e-3):
    """Central-difference gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def linear_alpha_bar(T, beta1=1e-4, betaT=0.02):
    beta = [beta1 + (betaT - beta1) * (t - 1) / (T - 1) for t in range(1, T + 1)] if T > 1 else [beta1]
    ab, out = 1.0, []
    for b in beta:
        ab *= 1.0 - b
        out.append(ab)
    return np.array(beta), np.array(out)


def gaussian_chain_moments(mu0, var0, beta, alpha_bar, lam, sigma, y, mask_obs=True):
    """Exact output mean/variance of the discrete posterior chain for a 1-D Gaussian prior.

    With prior ``N(mu0, var0)``, identity observation and the update
    ``x <- x + b (x/2 + s + lam g) + sqrt(b) z`` every step is affine in
    ``x``, so mean and variance propagate in closed form. ``mask_obs=False``
    drops the likelihood term (unobserved coordinate).
    """
    m, v = 0.0, 1.0
    T = len(beta)
    for t in range(T, 0, -1):
        b, ab = beta[t - 1], alpha_bar[t - 1]
        vt = ab * var0 + 1.0 - ab
        # score s = -(x - sqrt(ab) mu0) / vt ; x0_hat = (x + (1-ab) s)/sqrt(ab) = c x + e
        c = (1.0 - (1.0 - ab) / vt) / math.sqrt(ab)
        e = (1.0 - ab) * math.sqrt(ab) * mu0 / vt / math.sqrt(ab)
        # likelihood grad = (c / sigma^2) (y - c x - e)
        a = 1.0 + b * (0.5 - 1.0 / vt)
        k = b * math.sqrt(ab) * mu0 / vt
        if mask_obs and lam:
            a -= b * lam * c * c / sigma ** 2
            k += b * lam * c * (y - e) / sigma ** 2
        m = a * m + k
        v = a * a * v + (b if t > 1 else 0.0)
    return m, v
