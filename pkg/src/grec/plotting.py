"""Figures for run reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_loss_curves(history: Sequence[dict], path, columns=("total", "det", "w2o", "p2o", "t2i", "count_cls", "con"),
                     window: int = 25) -> Path:
    """Moving-average loss components against step, with the phase switch marked."""
    path = Path(path)
    steps = np.array([int(r["step"]) for r in history])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for col in columns:
            y = np.array([float(r.get(col, 0.0)) for r in history])
            if not np.any(y):
                continue
            ys = _smooth(y, window)
            ax.plot(steps[len(steps) - len(ys):], ys, label=col, lw=1.2)
        switch = [int(r["step"]) for r in history if r.get("phase") == "finetune"]
        if switch:
            ax.axvline(switch[0], color="0.4", ls="--", lw=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(ncol=4, loc="upper right")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_per_kind(per_kind: dict, path, metric: str = "precision_f1") -> Path:
    """Bar chart of one metric split by expression kind."""
    path = Path(path)
    kinds = sorted(per_kind)
    values = [per_kind[k][metric] for k in kinds]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(kinds, values, color="#4c72b0", width=0.6)
        for bar, v in zip(bars, values):
            ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.2f}", ha="center", va="bottom")
        ax.set_ylim(0, 1.08)
        ax.set_ylabel(metric)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_variants(rows: Sequence[dict], path, metrics=("precision_f1", "n_acc", "count_acc")) -> Path:
    """Grouped bars comparing variants (one row per variant, keyed by ``name``)."""
    path = Path(path)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(rows), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, row in enumerate(rows):
            vals = [row.get(m) or 0.0 for m in metrics]
            ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=row["name"])
        ax.set_xticks(x, metrics)
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path
