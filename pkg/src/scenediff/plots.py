"""Static plots: loss curves and recall against K."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricReport  # noqa: E402


def plot_losses(curves: dict[str, Sequence[float]], path: str | Path, xlabel: str = "step") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in curves.items():
        ax.plot(range(len(ys)), list(ys), label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_recall(reports: Sequence[MetricReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        ks = list(rep.ks)
        ax.plot(ks, [rep.recall[k] for k in ks], marker="o", label=f"R@K {rep.constraint_mode}")
        ax.plot(ks, [rep.mean_recall[k] for k in ks], marker="x", linestyle="--", label=f"mR@K {rep.constraint_mode}")
    ax.set_xlabel("K")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
