# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused float32 kernels for the training and sampling inner loops.

Every function here has a numpy twin in ``_pykernels`` with the same
signature; ``emdiff._kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport expf, sqrtf

cnp.import_array()

ctypedef cnp.float32_t f32


def silu_forward(x_in):
    """Return ``(x * sigmoid(x), sigmoid(x))`` in one pass."""
    cdef cnp.ndarray[f32, ndim=1] x = np.ascontiguousarray(x_in, dtype=np.float32).reshape(-1)
    cdef Py_ssize_t n = x.shape[0], i
    cdef cnp.ndarray[f32, ndim=1] out = np.empty(n, dtype=np.float32)
    cdef cnp.ndarray[f32, ndim=1] sig = np.empty(n, dtype=np.float32)
    cdef f32 v, s
    for i in range(n):
        v = x[i]
        if v >= 0:
            s = 1.0 / (1.0 + expf(-v))
        else:
            s = expf(v)
            s = s / (1.0 + s)
        sig[i] = s
        out[i] = v * s
    return out.reshape(x_in.shape), sig.reshape(x_in.shape)


def silu_backward(x_in, sig_in, grad_in):
    """Gradient of SiLU given the cached sigmoid: ``g * s * (1 + x (1 - s))``."""
    cdef cnp.ndarray[f32, ndim=1] x = np.ascontiguousarray(x_in, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[f32, ndim=1] s = np.ascontiguousarray(sig_in, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[f32, ndim=1] g = np.ascontiguousarray(grad_in, dtype=np.float32).reshape(-1)
    cdef Py_ssize_t n = x.shape[0], i
    cdef cnp.ndarray[f32, ndim=1] out = np.empty(n, dtype=np.float32)
    for i in range(n):
        out[i] = g[i] * s[i] * (1.0 + x[i] * (1.0 - s[i]))
    return out.reshape(x_in.shape)


def adamw_update(param_in, grad_in, m_in,
                 v_in, double lr, double beta1, double beta2,
                 double eps, double weight_decay, double bias1, double bias2):
    """In-place decoupled-weight-decay Adam update of one parameter buffer.

    ``bias1``/``bias2`` are the bias-correction denominators ``1 - beta**step``.
    All four arrays must be C-contiguous float32 of equal size.
    """
    cdef f32[::1] p = param_in.reshape(-1)
    cdef f32[::1] g = grad_in.reshape(-1)
    cdef f32[::1] m = m_in.reshape(-1)
    cdef f32[::1] v = v_in.reshape(-1)
    cdef Py_ssize_t n = p.shape[0], i
    cdef f32 decay = <f32>(1.0 - lr * weight_decay)
    cdef f32 b1 = <f32>beta1, b2 = <f32>beta2
    cdef f32 c1 = <f32>(1.0 - beta1), c2 = <f32>(1.0 - beta2)
    cdef f32 mhat, vhat, gi
    for i in range(n):
        gi = g[i]
        p[i] = p[i] * decay
        m[i] = b1 * m[i] + c1 * gi
        v[i] = b2 * v[i] + c2 * gi * gi
        mhat = m[i] / <f32>bias1
        vhat = v[i] / <f32>bias2
        p[i] = p[i] - <f32>lr * mhat / (sqrtf(vhat) + <f32>eps)


def ema_update(shadow_in, param_in, double decay):
    """In-place ``shadow += (1 - decay) * (param - shadow)``; exact when they already agree."""
    cdef f32[::1] s = shadow_in.reshape(-1)
    cdef f32[::1] p = np.ascontiguousarray(param_in, dtype=np.float32).reshape(-1)
    cdef Py_ssize_t n = s.shape[0], i
    cdef f32 c = <f32>(1.0 - decay)
    for i in range(n):
        s[i] = s[i] + c * (p[i] - s[i])


def circular_conv2d(images_in, kernel_in):
    """Periodic 2-D convolution of a batch ``(n, h, w)`` with a ``(k, k)`` kernel.

    ``out[b, i, j] = sum_{u,v} K[u, v] * x[b, (i - u + r) % h, (j - v + r) % w]``
    with ``r = k // 2`` so the kernel centre sits on the output pixel.
    """
    cdef cnp.ndarray[f32, ndim=3] x = np.ascontiguousarray(images_in, dtype=np.float32)
    cdef cnp.ndarray[f32, ndim=2] K = np.ascontiguousarray(kernel_in, dtype=np.float32)
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t k = K.shape[0], r = k // 2
    cdef f32[:, :, ::1] out = np.zeros((nb, h, w), dtype=np.float32)
    cdef f32[:, :, ::1] xv = x
    cdef f32[:, ::1] Kv = K
    # wrapped row/column index for every (output position, kernel tap)
    cdef Py_ssize_t[:, ::1] rows = np.mod(np.arange(h)[:, None] - np.arange(k)[None, :] + r, h).astype(np.intp)
    cdef Py_ssize_t[:, ::1] cols = np.mod(np.arange(w)[:, None] - np.arange(k)[None, :] + r, w).astype(np.intp)
    cdef Py_ssize_t b, i, j, u, vv, ii
    cdef double acc
    for b in range(nb):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for u in range(k):
                    ii = rows[i, u]
                    for vv in range(k):
                        acc += Kv[u, vv] * xv[b, ii, cols[j, vv]]
                out[b, i, j] = <f32>acc
    return np.asarray(out)
