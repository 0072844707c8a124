"""Command-line entry point: ``emdiff <command> --config NAME [--set key=value ...]``.

Errors print one line ``emdiff-error <category>: <detail>`` to stderr and exit
with the category's code.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .checkpoint import CheckpointError
from .container import ContainerError, load_container, save_container
from .data_eval import evaluate, sliced_wasserstein
from .em import EMError, load_checkpoint, read_metrics_csv, save_checkpoint
from .sampler import SamplerDivergence, sample_posterior, sample_unconditional
from .score_models import NeuralScore
from .trainer import TrainingError

EXIT_CODES = {"internal": 1, "config": 2, "input": 3, "checkpoint": 4, "divergence": 5,
              "training": 6, "io": 7}


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category
        self.detail = detail


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory: Path, command: str, cfg: pl.RunConfig, outputs: list[str],
                   extra: dict | None = None) -> None:
    """Manifest listing each output's hash; the wall-clock stamp sits under ``created`` only."""
    body = {"command": command, "config_digest": cfg.digest(),
            "outputs": {name: _sha256(directory / name) for name in sorted(outputs)}}
    if extra:
        body.update(extra)
    body["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    (directory / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError("input", f"{what} not found at {path}")
    return path


def _setup(args) -> tuple[pl.RunConfig, Path]:
    cfg = pl.load_config(args.config, args.set)
    root = pl.run_dir(cfg, args.out)
    return cfg, root


def _echo_config(cfg: pl.RunConfig, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(cfg.to_yaml())


# --------------------------------------------------------------- commands

def cmd_gen_data(args) -> dict:
    cfg, root = _setup(args)
    splits = pl.gen_data(cfg)
    _echo_config(cfg, root)
    for name, ds in splits.items():
        pl.save_dataset(ds, root / "data" / name, pl.stage_digest(cfg, "data"))
    return {"data": str(root / "data"), "sizes": {k: len(v) for k, v in splits.items()}}


def cmd_corrupt(args) -> dict:
    cfg, root = _setup(args)
    src = _require_file(root / "data" / "train" / "manifest.json", "training split").parent
    obs = pl.corrupt_dataset(cfg, pl.load_dataset(src))
    _echo_config(cfg, root)
    pl.save_observations(obs, root / "observations", pl.stage_digest(cfg, "observations"))
    return {"observations": str(root / "observations"), "n": len(obs)}


def cmd_init_train(args) -> dict:
    cfg, root = _setup(args)
    src = _require_file(root / "data" / "init" / "manifest.json", "init split").parent
    init = pl.load_dataset(src)
    _echo_config(cfg, root)
    out = root / "init"
    out.mkdir(parents=True, exist_ok=True)
    _, state = pl.init_model(cfg, init)
    save_checkpoint(state, out / "checkpoint.bin")
    write_manifest(out, "init-train", cfg, ["checkpoint.bin"])
    return {"checkpoint": str(out / "checkpoint.bin")}


def cmd_em_run(args) -> dict:
    cfg, root = _setup(args)
    state = pl.run_pipeline(cfg, root, resume=args.resume)
    em_dir = root / "em"
    write_manifest(em_dir, "em-run", cfg, ["metrics.csv", "checkpoint.bin"])
    return {"iterations": state.iteration, "phase": state.phase,
            "lambda_history": state.lambda_history, "metrics": str(em_dir / "metrics.csv")}


def _load_state(root: Path, override: str | None):
    if override:
        path = _require_file(Path(override), "checkpoint")
    else:
        path = root / "em" / "checkpoint.bin"
        if not path.exists():
            path = _require_file(root / "init" / "checkpoint.bin", "checkpoint")
    return load_checkpoint(path), path


def cmd_sample(args) -> dict:
    cfg, root = _setup(args)
    if args.n is not None and args.n < 1:
        raise CliError("config", "--n must be positive")
    if args.lam is not None and args.lam < 0:
        raise CliError("config", "--lam must be nonnegative")
    state, path = _load_state(root, args.checkpoint)
    obs_dir = root / "observations"
    if args.posterior:
        _require_file(obs_dir / "manifest.json", "observations")
    net = pl.net_from_state(cfg, state)
    schedule = cfg.schedule()
    model = NeuralScore(net, schedule)
    sampler = cfg.sampler_config(schedule).replace(seed=args.seed if args.seed is not None else cfg["seed"])
    out = Path(args.dest) if args.dest else root / "samples"
    if args.posterior:
        obs = pl.load_observations(obs_dir)
        n = len(obs) if args.n is None else min(args.n, len(obs))
        lam = args.lam if args.lam is not None else (state.lambda_history[-1] if state.lambda_history else 1.0)
        batch = obs.batch().subset(np.arange(n))
        res = sample_posterior(model, None, batch, sampler.replace(lam=lam))
        arrays = {"samples": res.x0, "data_loss": np.nan_to_num(res.data_loss, nan=-1.0),
                  "diverged": res.diverged.astype(np.float32)}
        meta = {"mode": "posterior", "lambda": lam, "checkpoint": str(path), "n": n}
    else:
        n = 1000 if args.n is None else args.n
        arrays = {"samples": sample_unconditional(model, n, sampler)}
        meta = {"mode": "unconditional", "checkpoint": str(path), "n": n}
    meta.update({"seed": sampler.seed, "config_digest": cfg.digest()})
    save_container(out, meta, arrays)
    return {"samples": str(out), **{k: v for k, v in meta.items() if k != "checkpoint"}}


def _load_array(path: str, key: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(_require_file(p, "array file"))
    _require_file(p / "manifest.json", "container")
    _, arrays = load_container(p)
    if key not in arrays:
        raise CliError("input", f"container {p} has no array {key!r} (has {sorted(arrays)})")
    return arrays[key]


def cmd_evaluate(args) -> dict:
    cfg, root = _setup(args)
    recon_path = args.recon or str(root / "samples")
    ref_path = args.reference or str(root / "data" / "test")
    recon = _load_array(recon_path, args.key)
    ref = _load_array(ref_path, args.ref_key)
    if recon.shape != ref.shape and args.paired:
        raise CliError("input", f"paired evaluation needs equal shapes, got {recon.shape} vs {ref.shape}")
    n_proj = cfg.em_config().swd_projections
    if recon.shape == ref.shape:
        rep = evaluate(recon, ref, n_proj, seed=cfg["seed"])
        psnr_mean, swd = rep.psnr_mean, rep.swd
    else:
        # unpaired sets: distribution distance only
        psnr_mean = float("nan")
        swd = sliced_wasserstein(recon, ref, n_proj, seed=cfg["seed"])
    out = Path(args.dest) if args.dest else root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["psnr_mean", repr(psnr_mean)])
        w.writerow(["swd", repr(swd)])
        w.writerow(["n_recon", len(recon)])
        w.writerow(["n_reference", len(ref)])
    write_manifest(out, "evaluate", cfg, ["report.csv"],
                   {"recon": recon_path, "reference": ref_path})
    return {"psnr_mean": psnr_mean, "swd": swd, "report": str(out / "report.csv")}


def cmd_plot(args) -> dict:
    cfg, root = _setup(args)
    metrics_path = Path(args.metrics) if args.metrics else root / "em" / "metrics.csv"
    rows = read_metrics_csv(_require_file(metrics_path, "metrics CSV"))
    if not rows:
        raise CliError("input", f"{metrics_path} has no rows")
    out = Path(args.dest) if args.dest else root / "plots"
    from .plots import plot_metrics
    written = plot_metrics(rows, out)
    write_manifest(out, "plot", cfg, [p.name for p in written])
    return {"plots": [str(p) for p in written]}


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the clean init/train/test splits"),
    "corrupt": (cmd_corrupt, "corrupt the training split into observations"),
    "init-train": (cmd_init_train, "fit the initial model on the few clean samples"),
    "em-run": (cmd_em_run, "run EM (missing earlier stages are run first)"),
    "sample": (cmd_sample, "draw unconditional or posterior samples from a checkpoint"),
    "evaluate": (cmd_evaluate, "PSNR and sliced-Wasserstein between two sample sets"),
    "plot": (cmd_plot, "render metrics.csv as SVG line charts"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="YAML file or shipped config name (e.g. toy_inpaint)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. em.n_iters=3")
        p.add_argument("--out", default=None,
                       help=f"run directory (relative paths resolve under ${pl.OUTPUT_ROOT_ENV})")
        if name == "em-run":
            p.add_argument("--resume", action="store_true", help="continue from em/checkpoint.bin")
        if name == "sample":
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--n", type=int, default=None)
            p.add_argument("--posterior", action="store_true")
            p.add_argument("--lam", type=float, default=None)
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--dest", default=None)
        if name == "evaluate":
            p.add_argument("--recon", default=None)
            p.add_argument("--reference", default=None)
            p.add_argument("--key", default="samples")
            p.add_argument("--ref-key", default="samples")
            p.add_argument("--paired", action="store_true")
            p.add_argument("--dest", default=None)
        if name == "plot":
            p.add_argument("--metrics", default=None)
            p.add_argument("--dest", default=None)
    return parser


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, pl.ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (SamplerDivergence, EMError)):
        return "divergence"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, ContainerError):
        return "input"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        result = func(args)
    except Exception as exc:
        cat = _classify(exc)
        detail = " ".join(str(exc).split()) or type(exc).__name__
        print(f"emdiff-error {cat}: {detail}", file=sys.stderr)
        if cat == "internal" and args.verbose:
            raise
        return EXIT_CODES[cat]
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
