"""Numpy implementations of the fused kernels (fallback backend)."""

import numpy as np


def silu_forward(x):
    x = np.asarray(x, dtype=np.float32)
    # piecewise form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)
    return (x * sig).astype(np.float32), sig


def silu_backward(x, sig, grad):
    return (grad * sig * (1.0 + x * (1.0 - sig))).astype(np.float32)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bias1, bias2):
    f = np.float32
    param *= f(1.0 - lr * weight_decay)
    m *= f(beta1)
    m += f(1.0 - beta1) * grad
    v *= f(beta2)
    v += f(1.0 - beta2) * grad * grad
    mhat = m / f(bias1)
    vhat = v / f(bias2)
    param -= f(lr) * mhat / (np.sqrt(vhat) + f(eps))


def ema_update(shadow, param, decay):
    shadow += np.float32(1.0 - decay) * (param - shadow)


def circular_conv2d(images, kernel):
    images = np.asarray(images, dtype=np.float32)
    kernel = np.asarray(kernel, dtype=np.float32)
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros_like(images, dtype=np.float64)
    for u in range(k):
        for v in range(k):
            out += kernel[u, v] * np.roll(images, shift=(u - r, v - r), axis=(1, 2))
    return out.astype(np.float32)
