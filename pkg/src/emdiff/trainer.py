"""Denoising score matching with AdamW and parameter EMA."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .schedule import NoiseSchedule, forward_diffuse
from .tensor import AdamW, MlpScoreNet, NonFiniteError, Tensor, ema_init, ema_update, warmup_decay

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    ema_warmup: bool = True
    dropout: float = 0.0
    seed: int = 0
    hflip: bool = False
    image_shape: tuple | None = None
    min_steps: int = 0

    def validate(self, n_data: int | None = None) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if n_data is not None and self.batch_size > n_data:
            raise ValueError(f"batch_size {self.batch_size} exceeds dataset size {n_data}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.hflip and self.image_shape is None:
            raise ValueError("hflip needs image_shape")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape) if self.image_shape else None
        return d


@dataclass
class TrainReport:
    epoch_losses: list
    ema_params: dict
    steps: int
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss"])
            for i, loss in enumerate(self.epoch_losses, 1):
                w.writerow([i, repr(float(loss))])


def dsm_loss(net: MlpScoreNet, x0: np.ndarray, schedule: NoiseSchedule,
             rng: np.random.Generator) -> Tensor:
    """Batch mean of ``||eps + net(sqrt(ab) x0 + sqrt(1 - ab) eps, t)||^2``.

    ``t`` is drawn uniformly from ``{1..T}`` per row, then ``eps ~ N(0, I)``.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.ndim != 2 or len(x0) == 0:
        raise ValueError("dsm_loss needs a nonempty (batch, d) array")
    n = len(x0)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    x_t = forward_diffuse(schedule, x0, t, eps)
    out = net(x_t, t, rng=rng)
    resid = out + Tensor(eps)
    return (resid * resid).sum() * (1.0 / n)


def _hflip(batch: np.ndarray, image_shape, rng) -> np.ndarray:
    flip = rng.random(len(batch)) < 0.5
    if not flip.any():
        return batch
    imgs = batch.reshape((-1,) + tuple(image_shape)).copy()
    imgs[flip] = imgs[flip][:, :, ::-1]
    return imgs.reshape(batch.shape)


def train(net: MlpScoreNet, data: np.ndarray, cfg: TrainConfig, schedule: NoiseSchedule,
          ema: "object | None" = None) -> TrainReport:
    """Fit ``net`` in place by minibatch DSM; returns per-epoch losses and EMA weights.

    Each epoch draws a fresh seeded permutation; every minibatch gets one
    AdamW step followed by one EMA update. Passing ``ema`` continues an
    existing average instead of starting from the current weights.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("training data must be a nonempty (n, d) array")
    cfg.validate(len(data))
    rng = np.random.default_rng(cfg.seed)
    net.config.dropout = cfg.dropout
    net.set_requires_grad(True)
    params = net.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if ema is None:
        ema = ema_init([p.data for p in params], cfg.ema_decay)
    n = len(data)
    per_epoch = max(1, n // cfg.batch_size)
    epochs = max(cfg.epochs, -(-cfg.min_steps // per_epoch)) if cfg.min_steps else cfg.epochs
    losses = []
    start = time.perf_counter()
    net.training = True
    steps = 0
    try:
        for epoch in range(epochs):
            perm = rng.permutation(n)
            total = 0.0
            for b in range(per_epoch):
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = data[idx]
                if cfg.hflip:
                    batch = _hflip(batch, cfg.image_shape, rng)
                opt.zero_grad()
                try:
                    loss = dsm_loss(net, batch, schedule, rng)
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite forward at epoch {epoch + 1}: {exc}") from exc
                loss.backward()
                opt.step()
                decay = warmup_decay(cfg.ema_decay, ema.updates) if cfg.ema_warmup else None
                ema_update(ema, [p.data for p in params], decay)
                total += float(loss.data)
                steps += 1
            mean = total / per_epoch
            if not np.isfinite(mean):
                raise TrainingError(f"loss not finite at epoch {epoch + 1}")
            losses.append(mean)
            if (epoch + 1) % max(1, epochs // 10) == 0:
                log.debug("epoch %d/%d loss %.5f", epoch + 1, epochs, mean)
    finally:
        net.training = False
        opt.zero_grad()
    names = list(net.named_parameters())
    shadow = {k: s.copy() for k, s in zip(names, ema.shadow)}
    return TrainReport(losses, shadow, steps, time.perf_counter() - start, {"ema": ema})


def init_train_on_clean(net: MlpScoreNet, few_clean: np.ndarray, cfg: TrainConfig,
                        schedule: NoiseSchedule) -> TrainReport:
    """Initial DSM fit on a small clean set; the net ends up holding the EMA weights."""
    few_clean = np.asarray(few_clean)
    if few_clean.ndim != 2 or len(few_clean) < 1:
        raise ValueError("need at least one clean sample")
    if cfg.batch_size > len(few_clean):
        cfg = TrainConfig(**{**cfg.__dict__, "batch_size": len(few_clean)})
    report = train(net, few_clean, cfg, schedule)
    report.extra["live"] = net.state_dict()
    net.load_state_dict(report.ema_params)
    return report
