"""SVG line charts of per-iteration EM metrics."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed salt and no date so repeated renders are byte-identical
_RC = {"svg.hashsalt": "emdiff", "svg.fonttype": "path"}

CHARTS = (
    ("lambda_star.svg", "lambda_star", "selected lambda", True),
    ("psnr.svg", "psnr_mean", "mean PSNR (dB)", False),
    ("data_loss.svg", "mean_data_loss", "mean data loss", True),
    ("swd.svg", "swd", "sliced Wasserstein", False),
)


def line_chart(x, y, ylabel: str, path: Path, log_y: bool = False, marks=None) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(x, y, marker="o", lw=1.5)
        if marks:
            ax.axvline(marks, color="grey", ls="--", lw=1, label="reset phase")
            ax.legend(loc="best", fontsize=8)
        if log_y and all(v > 0 for v in y):
            ax.set_yscale("log")
        ax.set_xlabel("EM iteration")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def plot_metrics(rows: list[dict], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    its = [r["iteration"] for r in rows]
    reset = next((r["iteration"] for r in rows if r["phase"] == "reset"), None)
    written = []
    for fname, key, label, log_y in CHARTS:
        ys = [r[key] for r in rows]
        written.append(line_chart(its, ys, label, out / fname, log_y, reset))
    return written
