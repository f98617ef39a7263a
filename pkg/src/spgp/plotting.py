"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .synth import DiversityResult  # noqa: E402


def plot_diversity(results: Sequence[DiversityResult], path: str | Path) -> Path:
    """Mean node-score std against rewiring fraction, one line per method."""
    fractions = [r.rewire_fraction for r in results]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in results[0].mean_score_std if results else ():
        ax.plot(fractions, [r.mean_score_std[method] for r in results], marker="o", label=method)
    ax.set_xlabel("rewired fraction of edges")
    ax.set_ylabel("mean per-graph score std")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_complexity(rows: Sequence[dict], path: str | Path) -> Path:
    """Log-log space (solid) and time (dashed) counts against n per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == method]
        n = np.array([r["n"] for r in sel], dtype=float)
        line, = ax.loglog(n, [r["space_units"] for r in sel], marker="o", label=f"{method} space")
        ax.loglog(n, [r["time_ops"] for r in sel], linestyle="--", color=line.get_color(), label=f"{method} time")
    ax.set_xlabel("nodes n")
    ax.set_ylabel("count")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training(train_loss: Sequence[Sequence[float]], val_metric: Sequence[Sequence[float]],
                  path: str | Path, metric_name: str = "accuracy") -> Path:
    """Per-fold training loss and validation metric curves."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    for i, (loss, val) in enumerate(zip(train_loss, val_metric)):
        a.plot(loss, label=f"fold {i}")
        b.plot(val)
    a.set_xlabel("epoch")
    a.set_ylabel("training loss")
    b.set_xlabel("epoch")
    b.set_ylabel(f"validation {metric_name}")
    if len(train_loss) <= 10:
        a.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
