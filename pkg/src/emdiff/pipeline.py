"""Run configuration and the staged pipeline shared by the CLI and the test suite.

Stages, each writing under the run directory::

    data/{init,train,test}/   gen_data         clean splits
    observations/             corrupt_stage    y, per-item masks, held-out truth
    init/                     init_stage       initial model checkpoint + loss curve
    em/                       em_stage         metrics.csv, timings.csv, checkpoint.bin
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .container import load_container, save_container
from .data_eval import Dataset, gen_gmm2d, gen_toyimages, split_dataset
from .em import EMConfig, EMProblem, EMState, initial_state, load_checkpoint, run_em, save_checkpoint
from .forward_ops import (ForwardOperator, MaskOp, batch_operators, corrupt, make_blur_op,
                          make_identity_op, make_mask_op, operator_from_dict)
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, linear_beta_schedule
from .tensor import MlpConfig, MlpScoreNet
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "EMDIFF_OUTPUT_ROOT"
TASKS = ("inpaint", "denoise", "deblur")


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- config

DEFAULTS: dict = {
    "task": "inpaint",
    "seed": 0,
    "output_dir": "run",
    "dataset": {"kind": "toyimages", "family": "bars", "height": 8, "width": 8,
                "n_init": 50, "n_train": 5000, "n_test": 500, "seed": 0,
                "gmm": None},
    "operator": {"mask_prob": 0.6, "sigma": 0.01, "kernel_size": 9, "sigma_blur": 2.0,
                 "seed": 1},
    "schedule": {"T": 200, "beta1": 1e-4, "betaT": 0.02},
    "model": {"hidden": [256, 256, 256], "time_dim": 32, "activation": "silu", "seed": 0},
    "trainer": {"epochs": 300, "batch_size": 128, "lr": 1e-3, "weight_decay": 1e-4,
                "ema_decay": 0.999, "ema_warmup": True, "dropout": 0.0, "hflip": False,
                "min_steps": 0},
    "init_trainer": {},
    "sampler": {"sigma": 0.7, "lambda_grid": [0.5, 1, 2, 5, 10, 20], "lambda_subset": 32,
                "steps": None, "divergence_threshold": 1e6},
    "em": {"n_iters": 10, "subset_size": None, "reset_at": None, "max_diverged_frac": 0.1,
           "swd_samples": 500, "swd_projections": 128},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and v is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            allow_any = k in ("init_trainer",)
            out[k] = {**out[k], **v} if allow_any else _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value`` -> (["a", "b"], parsed value); values are read as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    if not key.strip():
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return key.strip().split("."), value


def apply_overrides(cfg: dict, overrides) -> dict:
    patch: dict = {}
    for text in overrides or []:
        keys, value = parse_override(text)
        node = patch
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return _merge(cfg, patch)


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("emdiff.configs").iterdir()
                  if p.name.endswith(".yaml"))


def resolve_config_path(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".yaml") else p.name
    shipped = resources.files("emdiff.configs") / f"{stem}.yaml"
    if shipped.is_file():
        return Path(str(shipped))
    raise ConfigError(f"config {name_or_path!r} not found (shipped: {', '.join(shipped_configs())})")


def load_config(name_or_path: str | None = None, overrides=None) -> "RunConfig":
    raw: dict = {}
    if name_or_path is not None:
        path = resolve_config_path(name_or_path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    merged = apply_overrides(_merge(DEFAULTS, raw), overrides)
    cfg = RunConfig(merged)
    cfg.validate()
    return cfg


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass
class RunConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def task(self) -> str:
        return self.raw["task"]

    def validate(self) -> None:
        r = self.raw
        _require(r["task"] in TASKS, f"task must be one of {TASKS}")
        _require(isinstance(r["seed"], int) and r["seed"] >= 0, "seed must be a nonnegative integer")
        d = r["dataset"]
        _require(d["kind"] in ("toyimages", "gmm2d"), "dataset.kind must be toyimages or gmm2d")
        for k in ("n_init", "n_train", "n_test"):
            _require(isinstance(d[k], int) and d[k] >= 1, f"dataset.{k} must be a positive integer")
        if d["kind"] == "toyimages":
            _require(d["family"] in ("bars", "blobs", "background"), "dataset.family is unknown")
            _require(d["height"] >= 4 and d["width"] >= 4, "images must be at least 4x4")
        else:
            _require(r["task"] != "deblur", "deblur needs an image dataset")
            g = d["gmm"]
            _require(isinstance(g, dict) and {"means", "covs", "weights"} <= set(g),
                     "dataset.gmm needs means, covs and weights")
        o = r["operator"]
        _require(0.0 <= o["mask_prob"] < 1.0, "operator.mask_prob must lie in [0, 1)")
        _require(o["sigma"] >= 0, "operator.sigma must be nonnegative")
        _require(isinstance(o["kernel_size"], int) and o["kernel_size"] >= 1 and o["kernel_size"] % 2 == 1,
                 "operator.kernel_size must be a positive odd integer")
        _require(o["sigma_blur"] > 0, "operator.sigma_blur must be positive")
        s = r["schedule"]
        _require(isinstance(s["T"], int) and s["T"] >= 1, "schedule.T must be a positive integer")
        _require(0 < s["beta1"] <= s["betaT"] < 1, "need 0 < schedule.beta1 <= schedule.betaT < 1")
        m = r["model"]
        _require(len(m["hidden"]) >= 1 and all(isinstance(h, int) and h >= 1 for h in m["hidden"]),
                 "model.hidden must list positive widths")
        _require(isinstance(m["time_dim"], int) and m["time_dim"] >= 2 and m["time_dim"] % 2 == 0,
                 "model.time_dim must be an even integer >= 2")
        _require(m["activation"] in ("silu", "tanh"), "model.activation must be silu or tanh")
        for name in ("trainer", "init_trainer"):
            unknown = set(r[name]) - set(DEFAULTS["trainer"])
            _require(not unknown, f"{name} has unknown keys {sorted(unknown)}")
            try:
                self.train_config(name == "init_trainer").validate()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        sp = r["sampler"]
        _require(sp["sigma"] > 0, "sampler.sigma must be positive")
        grid = sp["lambda_grid"]
        _require(isinstance(grid, list) and len(grid) >= 1, "sampler.lambda_grid must be a nonempty list")
        _require(all(isinstance(g, (int, float)) and g >= 0 for g in grid), "lambda values must be >= 0")
        _require(len(set(grid)) == len(grid), "sampler.lambda_grid has repeated values")
        _require(isinstance(sp["lambda_subset"], int) and sp["lambda_subset"] >= 1,
                 "sampler.lambda_subset must be a positive integer")
        _require(sp["steps"] is None or (isinstance(sp["steps"], int) and 1 <= sp["steps"] <= s["T"]),
                 "sampler.steps must lie in [1, T]")
        _require(sp["divergence_threshold"] > 0, "sampler.divergence_threshold must be positive")
        e = r["em"]
        _require(isinstance(e["n_iters"], int) and e["n_iters"] >= 0, "em.n_iters must be >= 0")
        _require(e["subset_size"] is None or (isinstance(e["subset_size"], int) and e["subset_size"] >= 1),
                 "em.subset_size must be null or a positive integer")
        _require(e["reset_at"] is None or (isinstance(e["reset_at"], int) and e["reset_at"] >= 1),
                 "em.reset_at must be null or a positive integer")
        _require(0.0 <= e["max_diverged_frac"] <= 1.0, "em.max_diverged_frac must lie in [0, 1]")
        _require(isinstance(e["swd_samples"], int) and e["swd_samples"] >= 0, "em.swd_samples must be >= 0")
        _require(isinstance(e["swd_projections"], int) and e["swd_projections"] >= 1,
                 "em.swd_projections must be positive")

    # -- typed views
    def data_dim(self) -> int:
        d = self.raw["dataset"]
        if d["kind"] == "toyimages":
            return d["height"] * d["width"]
        return len(d["gmm"]["means"][0])

    def image_shape(self) -> tuple | None:
        d = self.raw["dataset"]
        return (d["height"], d["width"]) if d["kind"] == "toyimages" else None

    def schedule(self) -> NoiseSchedule:
        s = self.raw["schedule"]
        return linear_beta_schedule(s["T"], s["beta1"], s["betaT"])

    def mlp_config(self) -> MlpConfig:
        m = self.raw["model"]
        return MlpConfig(self.data_dim(), hidden=tuple(m["hidden"]), time_dim=m["time_dim"],
                         activation=m["activation"], dropout=self.raw["trainer"]["dropout"])

    def train_config(self, init: bool = False) -> TrainConfig:
        t = dict(self.raw["trainer"])
        if init:
            t.update(self.raw["init_trainer"])
        return TrainConfig(image_shape=self.image_shape() if t.get("hflip") else None,
                           seed=self.raw["seed"], **t)

    def sampler_config(self, schedule: NoiseSchedule | None = None) -> SamplerConfig:
        sp = self.raw["sampler"]
        return SamplerConfig(schedule or self.schedule(), sigma=sp["sigma"], steps=sp["steps"],
                             seed=self.raw["seed"], divergence_threshold=sp["divergence_threshold"])

    def em_config(self) -> EMConfig:
        e, sp = self.raw["em"], self.raw["sampler"]
        return EMConfig(n_iters=e["n_iters"], subset_size=e["subset_size"],
                        lambda_grid=tuple(float(v) for v in sp["lambda_grid"]),
                        lambda_subset=sp["lambda_subset"], reset_at=e["reset_at"],
                        max_diverged_frac=e["max_diverged_frac"], swd_samples=e["swd_samples"],
                        swd_projections=e["swd_projections"], seed=self.raw["seed"])

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def run_dir(cfg: RunConfig, override: str | None = None) -> Path:
    p = Path(override) if override else Path(cfg["output_dir"])
    return p if p.is_absolute() else output_root() / p


# ------------------------------------------------------------------- data

def gen_data(cfg: RunConfig) -> dict[str, Dataset]:
    d = cfg["dataset"]
    sizes = {"init": d["n_init"], "train": d["n_train"], "test": d["n_test"]}
    total = sum(sizes.values())
    if d["kind"] == "toyimages":
        ds = gen_toyimages(d["height"], d["width"], d["family"], total, d["seed"])
    else:
        g = d["gmm"]
        ds = gen_gmm2d(len(g["weights"]), g["means"], g["covs"], g["weights"], total, d["seed"])
    return split_dataset(ds, sizes, d["seed"])


def save_dataset(ds: Dataset, path, stage_digest: str | None = None) -> Path:
    meta = {"kind": ds.kind, "spec": ds.spec, "seed": ds.seed, "split": ds.split,
            "image_shape": list(ds.image_shape) if ds.image_shape else None,
            "stage_digest": stage_digest}
    arrays = {"samples": ds.samples}
    if ds.indices is not None:
        arrays["indices"] = ds.indices.astype(np.float32)
    return save_container(path, meta, arrays)


def load_dataset(path) -> Dataset:
    meta, arrays = load_container(path)
    idx = arrays.get("indices")
    return Dataset(arrays["samples"], meta["kind"], meta["spec"], meta["seed"], meta["split"],
                   tuple(meta["image_shape"]) if meta["image_shape"] else None,
                   None if idx is None else idx.astype(np.int64))


@dataclass
class ObservationSet:
    """Corrupted observations with their operators; ``truth`` is held out for metrics."""

    y: list
    ops: list
    sigma: float
    seed: int
    truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def batch(self):
        return batch_operators(self.ops, self.y)


def make_operator(cfg: RunConfig, item: int) -> ForwardOperator:
    o = cfg["operator"]
    if cfg.task == "inpaint":
        shape = cfg.image_shape() or (cfg.data_dim(),)
        return make_mask_op(shape, o["mask_prob"], o["seed"], stream=item)
    if cfg.task == "deblur":
        return make_blur_op(cfg.image_shape(), o["kernel_size"], o["sigma_blur"])
    return make_identity_op(cfg.data_dim())


def corrupt_dataset(cfg: RunConfig, ds: Dataset) -> ObservationSet:
    """One operator per item for inpainting, one shared operator otherwise."""
    o = cfg["operator"]
    rng = np.random.default_rng([o["seed"], 0xC0])
    shared = None if cfg.task == "inpaint" else make_operator(cfg, 0)
    ops, ys = [], []
    for i, x in enumerate(ds.samples):
        op = shared or make_operator(cfg, i)
        ops.append(op)
        ys.append(corrupt(x, op, o["sigma"], rng).astype(np.float32))
    meta = {"task": cfg.task, "operator": cfg["operator"]}
    return ObservationSet(ys, ops, float(o["sigma"]), int(o["seed"]), ds.samples.copy(), meta)


def save_observations(obs: ObservationSet, path, stage_digest: str | None = None) -> Path:
    n, d = len(obs), obs.ops[0].in_dim
    meta = {"sigma": obs.sigma, "seed": obs.seed, "n": n, "dim": d, "stage_digest": stage_digest,
            **obs.meta}
    arrays = {}
    if isinstance(obs.ops[0], MaskOp):
        y = np.zeros((n, d), dtype=np.float32)
        mask = np.zeros((n, d), dtype=np.float32)
        for i, (op, v) in enumerate(zip(obs.ops, obs.y)):
            y[i, op.keep] = v
            mask[i, op.keep] = 1.0
        arrays["y"], arrays["mask"] = y, mask
        arrays["resamples"] = np.array([op.meta.get("resamples", 0) for op in obs.ops], np.float32)
        meta["op_kind"] = "mask"
    else:
        arrays["y"] = np.stack(obs.y).astype(np.float32)
        meta["op_kind"] = obs.ops[0].kind
        meta["op"] = obs.ops[0].to_dict()
    if obs.truth is not None:
        arrays["truth"] = obs.truth
    return save_container(path, meta, arrays)


def load_observations(path) -> ObservationSet:
    meta, arrays = load_container(path)
    if meta["op_kind"] == "mask":
        opmeta = meta["operator"]
        ops, ys = [], []
        for i, row in enumerate(arrays["mask"]):
            keep = np.flatnonzero(row > 0.5)
            ops.append(MaskOp(meta["dim"], keep,
                              {"mask_prob": float(opmeta["mask_prob"]), "seed": int(opmeta["seed"]),
                               "stream": i, "resamples": int(arrays["resamples"][i])}))
            ys.append(arrays["y"][i, keep])
    else:
        op = operator_from_dict(meta["op"])
        ops = [op] * meta["n"]
        ys = list(arrays["y"])
    extra = {k: v for k, v in meta.items() if k in ("task", "operator")}
    return ObservationSet(ys, ops, float(meta["sigma"]), int(meta["seed"]), arrays.get("truth"), extra)


# ------------------------------------------------------------------ model

def make_net(cfg: RunConfig) -> MlpScoreNet:
    return MlpScoreNet.create(cfg.mlp_config(), seed=cfg["model"]["seed"])


def build_problem(cfg: RunConfig, obs: ObservationSet, init: Dataset | None,
                  test: Dataset | None) -> EMProblem:
    return EMProblem(obs.batch(), obs.sigma,
                     None if init is None else init.samples,
                     obs.truth,
                     None if test is None else test.samples)


def init_model(cfg: RunConfig, init: Dataset) -> tuple[MlpScoreNet, EMState]:
    net = make_net(cfg)
    state = initial_state(net, init.samples, cfg.train_config(init=True), cfg.schedule(),
                          cfg["seed"], {**cfg.raw, "_init_digest": stage_digest(cfg, "init")})
    return net, state


def net_from_state(cfg: RunConfig, state: EMState, which: str = "ema") -> MlpScoreNet:
    net = make_net(cfg)
    net.load_state_dict(state.ema if which == "ema" else state.params)
    return net


STAGE_KEYS = {
    "data": ("dataset",),
    "observations": ("dataset", "task", "operator"),
    "init": ("dataset", "schedule", "model", "trainer", "init_trainer", "seed"),
}


def stage_digest(cfg: RunConfig, stage: str) -> str:
    part = {k: cfg.raw[k] for k in STAGE_KEYS[stage]}
    return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()[:16]


def _container_digest(path: Path) -> str | None:
    try:
        return json.loads((path / "manifest.json").read_text())["meta"].get("stage_digest")
    except (OSError, KeyError, ValueError):
        return None


def run_pipeline(cfg: RunConfig, root, resume: bool = False) -> EMState:
    """All stages end to end.

    A stage's existing output is reused only when it was produced from the
    same config sections; anything stale is regenerated.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(cfg.to_yaml())
    data_dir = root / "data"
    fresh = False
    if any(_container_digest(data_dir / n) != stage_digest(cfg, "data") for n in ("init", "train", "test")):
        for name, ds in gen_data(cfg).items():
            save_dataset(ds, data_dir / name, stage_digest(cfg, "data"))
        fresh = True
    init = load_dataset(data_dir / "init")
    test = load_dataset(data_dir / "test")
    obs_dir = root / "observations"
    if fresh or _container_digest(obs_dir) != stage_digest(cfg, "observations"):
        save_observations(corrupt_dataset(cfg, load_dataset(data_dir / "train")), obs_dir,
                          stage_digest(cfg, "observations"))
        fresh = True
    obs = load_observations(obs_dir)
    schedule = cfg.schedule()
    em_dir = root / "em"
    state = None
    if resume and not fresh and (em_dir / "checkpoint.bin").exists():
        state = load_checkpoint(em_dir / "checkpoint.bin")
        if state.config.get("_init_digest") != stage_digest(cfg, "init"):
            raise ConfigError("cannot resume: checkpoint was produced from a different config")
    init_ckpt = root / "init" / "checkpoint.bin"
    if state is None and not fresh and init_ckpt.exists():
        state = load_checkpoint(init_ckpt)
        if state.config.get("_init_digest") != stage_digest(cfg, "init"):
            state = None
    if state is None:
        _, state = init_model(cfg, init)
        init_ckpt.parent.mkdir(exist_ok=True)
        save_checkpoint(state, init_ckpt)
    state.config = {**cfg.raw, "_init_digest": stage_digest(cfg, "init")}
    net = net_from_state(cfg, state)
    problem = build_problem(cfg, obs, init, test)
    return run_em(net, problem, schedule, cfg.train_config(), cfg.sampler_config(schedule),
                  cfg.em_config(), state=state, out_dir=em_dir)
