"""Linear corruption operators, the Gaussian observation model and data loss.

Signals are flat vectors of dimension ``d``; batches are ``(n, d)``. Image
operators carry their ``(h, w)`` layout and reshape internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .tensor import Tensor, linear_map


class ForwardOperator:
    kind: str = "abstract"
    in_dim: int
    out_dim: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_tensor(self, x: Tensor) -> Tensor:
        return linear_map(x, self.apply, self.adjoint, name=f"A[{self.kind}]")

    def to_dict(self) -> dict:
        raise NotImplementedError

    def matrix(self) -> np.ndarray:
        """Dense ``(out_dim, in_dim)`` matrix, built column by column."""
        return self.apply(np.eye(self.in_dim)).T.astype(np.float64)

    def _check_in(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.kind}: expected trailing dim {self.in_dim}, got {x.shape}")

    def _check_out(self, y: np.ndarray) -> None:
        if y.shape[-1] != self.out_dim:
            raise ValueError(f"{self.kind}: expected trailing dim {self.out_dim}, got {y.shape}")


class IdentityOp(ForwardOperator):
    kind = "identity"

    def __init__(self, dim: int):
        self.in_dim = self.out_dim = int(dim)

    def apply(self, x):
        x = np.asarray(x)
        self._check_in(x)
        return x.copy()

    def adjoint(self, y):
        y = np.asarray(y)
        self._check_out(y)
        return y.copy()

    def to_dict(self):
        return {"kind": "identity", "dim": self.in_dim}


class MaskOp(ForwardOperator):
    """Keeps the coordinates listed in ``keep``; output is the compacted vector."""

    kind = "mask"

    def __init__(self, dim: int, keep: Sequence[int], meta: dict | None = None):
        self.in_dim = int(dim)
        self.keep = np.asarray(sorted(int(i) for i in keep), dtype=np.int64)
        if self.keep.size and (self.keep[0] < 0 or self.keep[-1] >= dim):
            raise ValueError("mask indices out of range")
        if len(np.unique(self.keep)) != len(self.keep):
            raise ValueError("duplicate mask indices")
        self.out_dim = int(self.keep.size)
        self.meta = dict(meta or {})

    @property
    def bitmap(self) -> np.ndarray:
        b = np.zeros(self.in_dim, dtype=bool)
        b[self.keep] = True
        return b

    def apply(self, x):
        x = np.asarray(x)
        self._check_in(x)
        return x[..., self.keep]

    def adjoint(self, y):
        y = np.asarray(y)
        self._check_out(y)
        out = np.zeros(y.shape[:-1] + (self.in_dim,), dtype=y.dtype)
        out[..., self.keep] = y
        return out

    def to_dict(self):
        return {"kind": "mask", "dim": self.in_dim, "keep": self.keep.tolist(), **self.meta}


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Sampled 2-D Gaussian on a ``size x size`` grid centred at the middle, summing to 1."""
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    if sigma <= 0:
        raise ValueError("blur sigma must be positive")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


class BlurOp(ForwardOperator):
    """Periodic convolution of ``(h, w)`` images with a normalized kernel."""

    kind = "blur"

    def __init__(self, image_shape: tuple[int, int], kernel: np.ndarray, meta: dict | None = None,
                 boundary: str = "circular"):
        if boundary != "circular":
            raise ValueError("only circular boundaries are supported")
        self.image_shape = tuple(int(s) for s in image_shape)
        self.kernel = np.asarray(kernel, dtype=np.float64)
        k = self.kernel.shape[0]
        if self.kernel.shape != (k, k) or k % 2 == 0:
            raise ValueError("blur kernel must be square with odd size")
        self.boundary = boundary
        self.in_dim = self.out_dim = self.image_shape[0] * self.image_shape[1]
        self.meta = dict(meta or {})
        self._k32 = self.kernel.astype(np.float32)
        self._k32_flip = self.kernel[::-1, ::-1].astype(np.float32).copy()

    def _conv(self, x, kern):
        x = np.asarray(x)
        lead = x.shape[:-1]
        imgs = x.reshape((-1,) + self.image_shape)
        if x.dtype == np.float64:
            out = _conv_f64(imgs, kern.astype(np.float64))
        else:
            out = _kernels.circular_conv2d(imgs.astype(np.float32), kern)
        return out.reshape(lead + (self.in_dim,))

    def apply(self, x):
        self._check_in(np.asarray(x))
        return self._conv(x, self._k32 if np.asarray(x).dtype != np.float64 else self.kernel)

    def adjoint(self, y):
        self._check_out(np.asarray(y))
        flipped = self._k32_flip if np.asarray(y).dtype != np.float64 else self.kernel[::-1, ::-1]
        return self._conv(y, flipped)

    def to_dict(self):
        return {"kind": "blur", "image_shape": list(self.image_shape),
                "boundary": self.boundary, **self.meta}


def _conv_f64(imgs, kern):
    k = kern.shape[0]
    r = k // 2
    out = np.zeros_like(imgs, dtype=np.float64)
    for u in range(k):
        for v in range(k):
            out += kern[u, v] * np.roll(imgs, shift=(u - r, v - r), axis=(1, 2))
    return out


# -------------------------------------------------------------- factories

def make_identity_op(dim: int) -> IdentityOp:
    return IdentityOp(dim)


def make_mask_op(shape, mask_prob: float, seed: int, stream: int = 0) -> MaskOp:
    """Independent Bernoulli mask dropping each coordinate with ``mask_prob``.

    A draw that drops every coordinate is redrawn from the next stream of the
    same seed; the number of redraws is kept in ``meta['resamples']``.
    """
    if not 0.0 <= mask_prob < 1.0:
        raise ValueError("mask_prob must lie in [0, 1)")
    d = int(np.prod(shape))
    attempt = 0
    while True:
        rng = np.random.default_rng([int(seed), int(stream), attempt])
        keep = np.flatnonzero(rng.random(d) >= mask_prob)
        if keep.size:
            break
        attempt += 1
    meta = {"mask_prob": float(mask_prob), "seed": int(seed), "stream": int(stream),
            "resamples": attempt}
    return MaskOp(d, keep, meta)


def make_blur_op(image_shape, kernel_size: int = 9, sigma_blur: float = 2.0,
                 boundary: str = "circular") -> BlurOp:
    kern = gaussian_kernel(kernel_size, sigma_blur)
    meta = {"kernel_size": int(kernel_size), "sigma_blur": float(sigma_blur)}
    return BlurOp(image_shape, kern, meta, boundary)


def operator_from_dict(d: dict) -> ForwardOperator:
    kind = d.get("kind")
    if kind == "identity":
        return IdentityOp(d["dim"])
    if kind == "mask":
        meta = {k: v for k, v in d.items() if k not in ("kind", "dim", "keep")}
        return MaskOp(d["dim"], d["keep"], meta)
    if kind == "blur":
        return make_blur_op(tuple(d["image_shape"]), d["kernel_size"], d["sigma_blur"],
                            d.get("boundary", "circular"))
    raise ValueError(f"unknown operator kind {kind!r}")


# ------------------------------------------------------ observation model

def corrupt(x: np.ndarray, op: ForwardOperator, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``y = A(x) + sigma * z`` with ``z ~ N(0, I)`` drawn from ``rng``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    ax = op.apply(np.asarray(x))
    if sigma == 0:
        return ax
    z = rng.standard_normal(ax.shape)
    return (ax + sigma * z).astype(ax.dtype)


def data_loss(y: np.ndarray, x0_hat: np.ndarray, op: ForwardOperator):
    """Squared L2 residual ``||y - A(x0_hat)||^2`` (per row for batches)."""
    r = np.asarray(y, dtype=np.float64) - np.asarray(op.apply(np.asarray(x0_hat)), dtype=np.float64)
    out = np.sum(r * r, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------- batched views

@dataclass
class OperatorBatch:
    """A stack of per-item observations sharing one batched linear map.

    For distinct masks the map works in padded form (``keep * x`` against
    the zero-filled observation), which has the same residual norm as the
    compacted form item by item.
    """

    apply: object
    adjoint: object
    y: np.ndarray
    ops: list = field(default_factory=list)

    def apply_tensor(self, x: Tensor) -> Tensor:
        return linear_map(x, self.apply, self.adjoint, name="A[batch]")

    def residual_norms(self, x: np.ndarray) -> np.ndarray:
        r = self.y.astype(np.float64) - np.asarray(self.apply(x), dtype=np.float64)
        return np.sum(r * r, axis=-1)

    def subset(self, idx) -> "OperatorBatch":
        ops = [self.ops[i] for i in idx] if len(self.ops) > 1 else self.ops
        ys = [self._item_y(i) for i in idx]
        return batch_operators(ops if len(ops) > 1 else ops * len(idx), ys)

    def _item_y(self, i):
        op = self.ops[i] if len(self.ops) > 1 else self.ops[0]
        if isinstance(op, MaskOp) and len(self.ops) > 1:
            return self.y[i][op.keep]
        return self.y[i]


def batch_operators(ops: Sequence[ForwardOperator], ys: Sequence[np.ndarray]) -> OperatorBatch:
    """Stack observations ``ys[i]`` of operators ``ops[i]`` for vectorized sampling."""
    if len(ops) != len(ys) or not ys:
        raise ValueError("need one operator per observation and at least one item")
    first = ops[0]
    if all(op is first for op in ops):
        y = np.stack([np.asarray(v, dtype=np.float32) for v in ys])
        first._check_out(y)
        return OperatorBatch(first.apply, first.adjoint, y, [first])
    if all(isinstance(op, MaskOp) for op in ops):
        d = first.in_dim
        if any(op.in_dim != d for op in ops):
            raise ValueError("masks of different signal dimension")
        keep = np.zeros((len(ops), d), dtype=np.float32)
        y = np.zeros((len(ops), d), dtype=np.float32)
        for i, (op, v) in enumerate(zip(ops, ys)):
            op._check_out(np.asarray(v))
            keep[i, op.keep] = 1.0
            y[i, op.keep] = v

        def fwd(x):
            return keep * x

        return OperatorBatch(fwd, fwd, y, list(ops))
    if all(op.to_dict() == first.to_dict() for op in ops):
        return batch_operators([first] * len(ops), ys)
    raise ValueError("cannot batch heterogeneous operators")
