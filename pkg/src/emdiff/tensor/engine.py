"""Dense float32 tensors with a reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure computing the vector-Jacobian product; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every leaf.

The graph is released after ``backward`` unless ``retain_graph=True``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import _kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class AutodiffError(RuntimeError):
    """Raised on misuse of the tape (e.g. backward on a detached tensor)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            dtype = dtype or data.dtype
            data = data.data
        # float64 only on explicit request (used by verification code)
        dtype = dtype or DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], Sequence] | None = None
        self._op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    # ------------------------------------------------------------- tape core
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor(data, dtype=data.dtype)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False,
                 inputs: Iterable["Tensor"] | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf.

        With ``inputs`` given, only those leaves receive gradients.
        """
        targets = None if inputs is None else {id(t) for t in inputs}
        if not self.requires_grad:
            raise AutodiffError("backward() called on a tensor that is not on the tape")
        if self._op == "consumed":
            raise AutodiffError("tape already consumed; pass retain_graph=True to reuse it")
        if grad is None:
            if self.data.size != 1:
                raise AutodiffError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if targets is None or id(node) in targets:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node._op = "consumed"

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)
        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)
        return Tensor._make(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        return Tensor._make(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / other)

    def reciprocal(self) -> "Tensor":
        a = self.data
        out = 1.0 / a
        return Tensor._make(out, (self,), lambda g: (-g * out * out,), "reciprocal")

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def bw(g):
            ga = g @ b.T if self.requires_grad else None
            gb = a.T @ g if other.requires_grad else None
            return ga, gb
        return Tensor._make(a @ b, (self, other), bw, "matmul")

    def __pow__(self, p: float) -> "Tensor":
        a = self.data
        return Tensor._make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * g * a,), "square")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def silu(self) -> "Tensor":
        a = self.data
        if a.dtype == np.float32:
            out, sig = _kernels.silu_forward(a)

            def bw(g):
                return (_kernels.silu_backward(a, sig, g.astype(np.float32, copy=False)),)
        else:
            sig = 1.0 / (1.0 + np.exp(-a))
            out = a * sig

            def bw(g):
                return (g * sig * (1.0 + a * (1.0 - sig)),)
        return Tensor._make(out, (self,), bw, "silu")

    # ------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(self.dtype),)
        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims), dtype=self.dtype)
        return Tensor._make(out, (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---------------------------------------------------------------- shaping
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: (g.reshape(old),), "reshape")

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def __getitem__(self, idx) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)
        return Tensor._make(np.array(self.data[idx]), (self,), bw, "getitem")

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
        return Tensor._make(out, (self,), bw, "softmax")


def _as_tensor(x, dtype=DEFAULT_DTYPE) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), bw, "stack")


def linear_map(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], name: str = "linear_map") -> Tensor:
    """Apply a linear map given as a pair of array functions.

    ``adjoint`` must be the exact transpose of ``forward``; it is what carries
    gradients back to ``x``.
    """
    out = np.asarray(forward(x.data), dtype=x.dtype)
    return Tensor._make(out, (x,), lambda g: (np.asarray(adjoint(g), dtype=x.dtype),), name)


def grad(output: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs`` (leaves), freeing the tape."""
    inputs = list(inputs)
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    output.backward(inputs=inputs)
    result = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t, g in zip(inputs, saved):
        t.grad = g
    return result
