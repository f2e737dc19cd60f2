"""Figures written next to the delimited reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "ugd",  # stable element ids across runs
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def accuracy_bars(table: dict, path, metrics=None, title="Pair-wise ranking accuracy"):
    """Grouped bars: one group per distortion column, one bar per metric."""
    metrics = list(metrics or table)
    columns = [c for c in next(iter(table.values())) if c != "MEAN"] + ["MEAN"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.1 * len(columns) + 2, 3.2))
        x = np.arange(len(columns))
        width = 0.8 / len(metrics)
        for i, m in enumerate(metrics):
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, [table[m][c] for c in columns], width, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels(columns, rotation=20, ha="right")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 105)
        ax.set_title(title)
        ax.legend(ncol=min(4, len(metrics)), loc="lower left", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def training_curves(log: list, path):
    """Per-task loss and task weight against epoch."""
    if not log:
        raise ValueError("empty training log")
    epochs = [row["epoch"] for row in log]
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7, 2.8))
        for task in log[0]["loss"]:
            ax0.plot(epochs, [row["loss"][task] for row in log], label=task)
        ax0.set_xlabel("epoch")
        ax0.set_ylabel("mean loss")
        ax0.legend(frameon=False)
        for task in log[0]["task_weights"]:
            ax1.plot(epochs, [row["task_weights"][task] for row in log], label=task)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("task weight")
        ax1.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def score_strip(scores: dict, path, title="UGD per degraded version"):
    """Scores of several clouds, one line per cloud across its versions."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for name, vals in scores.items():
            ax.plot(range(1, len(vals) + 1), vals, marker="o", label=name)
        ax.set_xlabel("version")
        ax.set_ylabel("score")
        ax.set_title(title)
        if len(scores) <= 8:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
