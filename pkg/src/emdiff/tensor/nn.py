"""Time-conditioned feedforward network used as the learned noise predictor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import NonFiniteError, Tensor, concat


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer-style sinusoidal embedding of integer timesteps.

    Returns an array of shape ``(len(t), dim)``; the first half holds sines,
    the second cosines, at geometrically spaced frequencies.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if dim == 0:
        return np.zeros((t.shape[0], 0), dtype=np.float32)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb.astype(np.float32)


@dataclass
class MlpConfig:
    data_dim: int
    hidden: tuple = (128, 128, 128)
    time_dim: int = 32
    activation: str = "silu"
    dropout: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.data_dim < 1:
            raise ValueError("data_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ("silu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpScoreNet:
    """MLP on ``concat(x, embed(t))`` predicting the negated forward noise.

    Layer ``i`` maps ``sizes[i] -> sizes[i+1]`` with weight ``W{i}`` of shape
    ``(in, out)`` and bias ``b{i}``; all but the last layer are followed by
    the activation (and dropout while ``training`` is set).
    """

    config: MlpConfig
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    training: bool = False

    @classmethod
    def create(cls, config: MlpConfig, seed: int = 0) -> "MlpScoreNet":
        net = cls(config)
        net.reset_parameters(seed)
        return net

    @property
    def sizes(self) -> list[int]:
        c = self.config
        return [c.data_dim + c.time_dim, *c.hidden, c.data_dim]

    def reset_parameters(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        sizes = self.sizes
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, np.float32), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise KeyError(f"parameter names differ: {sorted(state)} vs {sorted(params)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, x, t, rng: np.random.Generator | None = None) -> Tensor:
        return forward_mlp(self, x, t, rng=rng)


def forward_mlp(net: MlpScoreNet, x, t, rng: np.random.Generator | None = None) -> Tensor:
    """Evaluate ``net`` on a batch ``x`` of shape ``(batch, d)`` at timestep(s) ``t``.

    ``t`` is a single integer or one integer per row.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cfg = net.config
    if x.ndim != 2 or x.shape[1] != cfg.data_dim:
        raise ValueError(f"expected input of shape (batch, {cfg.data_dim}), got {x.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t_arr = np.full(x.shape[0], int(t_arr))
    elif t_arr.shape != (x.shape[0],):
        raise ValueError("t must be a scalar or have one entry per row")
    if np.any(t_arr < 1):
        raise ValueError("timesteps start at 1")

    h = x
    if cfg.time_dim:
        emb = sinusoidal_embedding(t_arr, cfg.time_dim).astype(x.dtype, copy=False)
        h = concat([x, Tensor(emb, dtype=x.dtype)], axis=1)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i == last:
            break
        h = h.silu() if cfg.activation == "silu" else _tanh(h)
        if net.training and cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            keep = (rng.random(h.shape) >= cfg.dropout).astype(h.dtype) / (1.0 - cfg.dropout)
            h = h * Tensor(keep, dtype=h.dtype)
    if not np.isfinite(h.data).all():
        raise NonFiniteError("network output is not finite")
    return h


def _tanh(h: Tensor) -> Tensor:
    out = np.tanh(h.data)
    return Tensor._make(out, (h,), lambda g: (g * (1.0 - out * out),), "tanh")
