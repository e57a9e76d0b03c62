"""Figures written next to the CLI's CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def plot_training_curve(curve: Sequence[dict], path: str | Path, best_epoch: int | None = None) -> Path:
    """Train loss on the left axis, validation AUC (when present) on the right."""
    path = Path(path)
    epochs = [row["epoch"] for row in curve]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [row["train_loss"] for row in curve], color="tab:blue", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss (per sample)")
        handles = ax.get_lines()
        aucs = [row.get("val_auc") for row in curve]
        if any(a is not None for a in aucs):
            ax2 = ax.twinx()
            ax2.grid(False)
            ax2.plot(epochs, [float("nan") if a is None else a for a in aucs], color="tab:orange", label="val AUC")
            ax2.set_ylabel("validation AUC")
            handles = handles + ax2.get_lines()
        if best_epoch is not None:
            ax.axvline(best_epoch, color="0.5", linestyle=":", linewidth=1)
        ax.legend(handles, [h.get_label() for h in handles], loc="center right")
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_bench(rows: Sequence[dict], path: str | Path) -> Path:
    """Seconds per fetch against corpus size, one line per engine, log-log."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mode, marker in (("trie", "o"), ("oracle", "s")):
            pts = sorted((r["corpus_cells"], r["seconds_per_query"]) for r in rows if r["mode"] == mode)
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker=marker, label=mode)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("corpus size (cells)")
        ax.set_ylabel("seconds per fetch")
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return path
