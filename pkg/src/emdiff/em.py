"""Alternating posterior sampling (E-step) and score refitting (M-step).

One run starts from a network fitted on a few clean samples, then for each
iteration ``i = 1..N``:

1. decide the M-step phase from the lambda history so far;
2. pick the likelihood weight on a small subset and draw one posterior
   sample per selected observation;
3. refit the network on those samples, warm-started (``resume``) or from a
   fresh initialization on every observation seen so far (``reset``);
4. record metrics and write a checkpoint.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .data_eval import psnr, sliced_wasserstein
from .forward_ops import OperatorBatch
from .sampler import LambdaSearchResult, SamplerConfig, sample_posterior, sample_unconditional, select_lambda
from .schedule import NoiseSchedule
from .score_models import GaussianPrior, GaussianScore, NeuralScore, ScoreModel
from .tensor import MlpConfig, MlpScoreNet, ema_init
from .trainer import TrainConfig, init_train_on_clean, train

log = logging.getLogger(__name__)

RESUME, RESET = "resume", "reset"
METRIC_COLUMNS = ["iteration", "phase", "lambda_star", "mean_data_loss", "psnr_mean", "swd"]

# seed-stream tags
_SUBSET, _LAMBDA, _SAMPLE, _TRAIN, _SWD, _REINIT = range(6)


class EMError(RuntimeError):
    pass


@dataclass
class EMConfig:
    n_iters: int = 10
    subset_size: int | None = None
    lambda_grid: tuple = (0.5, 1.0, 2.0, 5.0, 10.0, 20.0)
    lambda_subset: int = 32
    reset_at: int | None = None
    max_diverged_frac: float = 0.1
    swd_samples: int = 500
    swd_projections: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.n_iters < 0:
            raise ValueError("n_iters must be >= 0")
        if self.subset_size is not None and self.subset_size < 1:
            raise ValueError("subset_size must be positive")
        if not self.lambda_grid:
            raise ValueError("lambda_grid is empty")
        if len(set(self.lambda_grid)) != len(self.lambda_grid) or min(self.lambda_grid) < 0:
            raise ValueError("lambda_grid must hold distinct nonnegative values")
        if self.lambda_subset < 1:
            raise ValueError("lambda_subset must be positive")
        if self.reset_at is not None and self.reset_at < 1:
            raise ValueError("reset_at counts iterations from 1")
        if not 0.0 <= self.max_diverged_frac <= 1.0:
            raise ValueError("max_diverged_frac must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_grid"] = [float(v) for v in self.lambda_grid]
        return d


@dataclass
class EMState:
    iteration: int
    phase: str
    params: dict
    ema: dict
    lambda_history: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    seen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ema_updates: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, EMState):
            return NotImplemented
        same_arrays = all(
            set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
            for a, b in ((self.params, other.params), (self.ema, other.ema)))
        return (same_arrays and self.iteration == other.iteration and self.phase == other.phase
                and self.lambda_history == other.lambda_history and self.metrics == other.metrics
                and self.seed == other.seed and self.config == other.config
                and np.array_equal(self.seen, other.seen) and self.ema_updates == other.ema_updates)


@dataclass
class EMProblem:
    """Observations plus the held-out pieces used only for metrics.

    ``batch`` holds every corrupted observation; ``truth`` (if known) is
    the matching clean signal for PSNR; ``reference`` is a clean set for
    the sliced-Wasserstein check; ``clean_init`` trains the initial model.
    """

    batch: OperatorBatch
    sigma: float
    clean_init: np.ndarray | None = None
    truth: np.ndarray | None = None
    reference: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.batch.y)


@dataclass
class EStepResult:
    indices: np.ndarray
    samples: np.ndarray
    data_loss: np.ndarray
    diverged: np.ndarray
    lambda_search: LambdaSearchResult

    @property
    def lambda_star(self) -> float:
        return self.lambda_search.lambda_star


def _rng(seed: int, iteration: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, tag])


def _stream_seed(seed: int, iteration: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, tag]).generate_state(1)[0])


# ------------------------------------------------------------------ phase

def phase_transition_check(history: Sequence[float], phase: str = RESUME,
                           reset_at: int | None = None, iteration: int | None = None) -> str:
    """Resume-vs-reset decision from the lambda history.

    Switches to ``reset`` once the latest lambda is below 1, or once lambda has
    failed to strictly decrease on more than three consecutive iterations.
    ``reset_at`` (with ``iteration``) forces the switch at a fixed iteration.
    The switch is one-way.
    """
    if phase == RESET:
        return RESET
    if reset_at is not None and iteration is not None and iteration >= reset_at:
        return RESET
    if not history:
        return RESUME
    if history[-1] < 1.0:
        return RESET
    stall = 0
    for prev, cur in zip(history[:-1], history[1:]):
        stall = stall + 1 if cur >= prev else 0
    return RESET if stall > 3 else RESUME


# ------------------------------------------------------------------ steps

def e_step(model: ScoreModel, problem: EMProblem, indices: np.ndarray, sampler: SamplerConfig,
           cfg: EMConfig, iteration: int) -> EStepResult:
    """Select lambda on a random subset of ``indices`` then sample every index once."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise EMError("E-step needs at least one observation")
    rng = _rng(cfg.seed, iteration, _LAMBDA)
    k = min(cfg.lambda_subset, len(indices))
    lam_idx = np.sort(rng.choice(indices, size=k, replace=False))
    search = select_lambda(model, problem.batch.subset(lam_idx), cfg.lambda_grid,
                           sampler.replace(seed=_stream_seed(cfg.seed, iteration, _LAMBDA)),
                           max_diverged_frac=cfg.max_diverged_frac)
    res = sample_posterior(model, None, problem.batch.subset(indices),
                           sampler.replace(lam=search.lambda_star,
                                           seed=_stream_seed(cfg.seed, iteration, _SAMPLE)))
    frac = res.n_diverged / len(indices)
    if frac > cfg.max_diverged_frac:
        raise EMError(f"{100 * frac:.1f}% of posterior chains diverged at iteration {iteration}")
    if res.n_diverged:
        log.warning("iteration %d: skipping %d diverged chains", iteration, res.n_diverged)
    return EStepResult(indices, res.x0, res.data_loss, res.diverged, search)


def _reset_net(net: MlpScoreNet, seed: int, iteration: int) -> None:
    net.reset_parameters(_stream_seed(seed, iteration, _REINIT))


def m_step(state: EMState, net: MlpScoreNet, samples: np.ndarray, train_cfg: TrainConfig,
           schedule: NoiseSchedule, phase: str, iteration: int) -> EMState:
    """Refit ``net`` on ``samples``; ``reset`` reinitializes weights and EMA first.

    On return ``net`` holds the EMA weights, ``state.params`` the live ones.
    """
    if len(samples) == 0:
        raise EMError("M-step needs at least one sample")
    cfg = TrainConfig(**{**train_cfg.__dict__,
                         "seed": _stream_seed(state.seed, iteration, _TRAIN),
                         "batch_size": min(train_cfg.batch_size, len(samples))})
    if phase == RESET:
        _reset_net(net, state.seed, iteration)
        ema = ema_init([p.data for p in net.parameters()], cfg.ema_decay)
    else:
        net.load_state_dict(state.params)
        names = list(net.named_parameters())
        ema = ema_init([state.ema[k] for k in names], cfg.ema_decay)
        ema.updates = state.ema_updates
    report = train(net, samples, cfg, schedule, ema=ema)
    state.params = net.state_dict()
    state.ema = report.ema_params
    state.ema_updates = report.extra["ema"].updates
    net.load_state_dict(state.ema)
    return state


# -------------------------------------------------------------------- run

def initial_state(net: MlpScoreNet, clean: np.ndarray, train_cfg: TrainConfig,
                  schedule: NoiseSchedule, seed: int, config: dict | None = None) -> EMState:
    """Fit ``net`` on the few clean samples and wrap it as iteration 0."""
    if clean is None or len(clean) == 0:
        raise EMError("initialization needs clean samples")
    report = init_train_on_clean(net, clean, train_cfg, schedule)
    return EMState(0, RESUME, report.extra["live"], net.state_dict(), seed=seed,
                   config=dict(config or {}), ema_updates=report.extra["ema"].updates)


def run_em(net: MlpScoreNet, problem: EMProblem, schedule: NoiseSchedule, train_cfg: TrainConfig,
           sampler: SamplerConfig, cfg: EMConfig, state: EMState | None = None,
           init_train_cfg: TrainConfig | None = None, out_dir=None,
           config_snapshot: dict | None = None) -> EMState:
    """Run (or continue) EM until ``cfg.n_iters`` iterations are complete.

    With ``out_dir`` set, ``metrics.csv``, ``timings.csv`` and
    ``checkpoint.bin`` are rewritten after every iteration.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = initial_state(net, problem.clean_init, init_train_cfg or train_cfg, schedule,
                              cfg.seed, config_snapshot)
    else:
        net.load_state_dict(state.ema)
    if out is not None:
        write_metrics_csv(state.metrics, out / "metrics.csv")
        save_checkpoint(state, out / "checkpoint.bin")
    timings: list[tuple[int, float]] = []
    model = NeuralScore(net, schedule)
    n_obs = len(problem)
    while state.iteration < cfg.n_iters:
        i = state.iteration + 1
        start = time.perf_counter()
        try:
            phase = phase_transition_check(state.lambda_history, state.phase, cfg.reset_at, i)
            size = n_obs if cfg.subset_size is None else min(cfg.subset_size, n_obs)
            subset = np.sort(_rng(cfg.seed, i, _SUBSET).choice(n_obs, size=size, replace=False))
            seen = np.union1d(state.seen, subset)
            idx = seen if phase == RESET else subset
            est = e_step(model, problem, idx, sampler, cfg, i)
            ok = ~est.diverged
            state.phase = phase
            state = m_step(state, net, est.samples[ok], train_cfg, schedule, phase, i)
            state.seen = seen.astype(np.int64)
            state.lambda_history.append(float(est.lambda_star))
            row = {"iteration": i, "phase": phase, "lambda_star": float(est.lambda_star),
                   "mean_data_loss": float(np.mean(est.data_loss[ok])),
                   "psnr_mean": _psnr_mean(problem, est),
                   "swd": _swd(model, problem, sampler, cfg, i)}
            state.metrics.append(row)
            state.iteration = i
            log.info("EM %d/%d phase=%s lambda*=%g loss=%.5g psnr=%.3f swd=%.4f", i, cfg.n_iters,
                     phase, row["lambda_star"], row["mean_data_loss"], row["psnr_mean"], row["swd"])
        except Exception:
            if out is not None:
                save_checkpoint(state, out / "checkpoint.bin")
            raise
        timings.append((i, time.perf_counter() - start))
        if out is not None:
            write_metrics_csv(state.metrics, out / "metrics.csv")
            _append_timing(out / "timings.csv", timings[-1])
            save_checkpoint(state, out / "checkpoint.bin")
    return state


def _psnr_mean(problem: EMProblem, est: EStepResult) -> float:
    if problem.truth is None:
        return float("nan")
    ok = ~est.diverged
    return float(np.mean(psnr(est.samples[ok], problem.truth[est.indices][ok])))


def _swd(model, problem: EMProblem, sampler: SamplerConfig, cfg: EMConfig, i: int) -> float:
    if problem.reference is None or cfg.swd_samples < 1:
        return float("nan")
    gen = sample_unconditional(model, cfg.swd_samples,
                               sampler.replace(seed=_stream_seed(cfg.seed, i, _SWD)))
    return sliced_wasserstein(gen, problem.reference, cfg.swd_projections, seed=cfg.seed)


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"], r["phase"]] +
                       [repr(float(r[c])) for c in METRIC_COLUMNS[2:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = {"iteration": int(r["iteration"]), "phase": r["phase"]}
        d.update({c: float(r[c]) for c in METRIC_COLUMNS[2:]})
        out.append(d)
    return out


def _append_timing(path: Path, item: tuple[int, float]) -> None:
    new = not path.exists() or item[0] == 1
    with open(path, "w" if new else "a", newline="") as fh:
        if new:
            fh.write("iteration,wall_clock_s\n")
        fh.write(f"{item[0]},{item[1]:.3f}\n")


# ------------------------------------------------------------- checkpoint

def save_checkpoint(state: EMState, path) -> None:
    header = {"iteration": state.iteration, "phase": state.phase,
              "lambda_history": state.lambda_history, "metrics": state.metrics,
              "seed": state.seed, "config": state.config, "ema_updates": state.ema_updates,
              "param_names": list(state.params), "ema_names": list(state.ema)}
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"ema/{k}": v for k, v in state.ema.items()})
    arrays["seen"] = state.seen.astype(np.float32)
    if len(state.seen) and state.seen.max() >= 2 ** 24:
        raise ckpt.CheckpointError("observation indices exceed float32 integer range")
    ckpt.write(path, header, arrays)


def load_checkpoint(path) -> EMState:
    header, arrays = ckpt.read(path)
    params = {k: arrays[f"param/{k}"] for k in header["param_names"]}
    ema = {k: arrays[f"ema/{k}"] for k in header["ema_names"]}
    return EMState(header["iteration"], header["phase"], params, ema, header["lambda_history"],
                   header["metrics"], header["seed"], header["config"],
                   arrays["seen"].astype(np.int64), header["ema_updates"])


# ------------------------------------------------------ gaussian-family EM

@dataclass
class GaussianEMResult:
    means: list
    variances: list
    lambda_history: list


def gaussian_em(y: np.ndarray, sigma: float, schedule: NoiseSchedule, n_iters: int = 20,
                init_mean: float = 0.0, init_var: float = 0.5, lambda_grid=(1.0,),
                lambda_subset: int = 256, seed: int = 0, steps: int | None = None) -> GaussianEMResult:
    """EM for an isotropic Gaussian prior with identity observations ``y = x + sigma n``.

    The E-step is the same posterior sampler used for the neural model, driven
    by the analytic Gaussian score; the M-step matches the first two moments
    of the posterior samples.
    """
    from .forward_ops import IdentityOp, batch_operators

    y = np.atleast_2d(np.asarray(y, dtype=np.float32))
    if y.shape[0] == 1 and y.shape[1] > 1:
        y = y.T
    d = y.shape[1]
    op = IdentityOp(d)
    problem = EMProblem(batch_operators([op] * len(y), list(y)), sigma)
    cfg = EMConfig(n_iters=n_iters, lambda_grid=tuple(lambda_grid),
                   lambda_subset=lambda_subset, seed=seed, max_diverged_frac=1.0)
    sampler = SamplerConfig(schedule, sigma=sigma, steps=steps)
    mean = np.full(d, init_mean, dtype=np.float64)
    var = float(init_var)
    means, variances, lams = [mean.copy()], [var], []
    for i in range(1, n_iters + 1):
        model = GaussianScore(GaussianPrior(mean, var * np.eye(d)), schedule)
        est = e_step(model, problem, np.arange(len(y)), sampler, cfg, i)
        xs = est.samples[~est.diverged].astype(np.float64)
        mean = xs.mean(axis=0)
        var = float(np.mean((xs - mean) ** 2))
        means.append(mean.copy())
        variances.append(var)
        lams.append(est.lambda_star)
    return GaussianEMResult(means, variances, lams)
