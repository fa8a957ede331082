"""Loss curves and metric bar charts, rendered off-screen to PNG."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(logs: Mapping[str, Sequence[Sequence[float]]], path: str | Path) -> Path:
    """One line per run; each log is a sequence of ``(step, loss)`` pairs."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(logs):
        entries = list(logs[name])
        if not entries:
            continue
        steps = [e[0] for e in entries]
        losses = [e[1] for e in entries]
        ax.plot(steps, losses, label=name, linewidth=1.2)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    if ax.lines:
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_metrics(rows: Sequence[Mapping], metrics: Sequence[str], path: str | Path) -> Path:
    """Grouped bars: one group per metric, one bar per run."""
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(metrics) + 2), 4))
    n = max(len(rows), 1)
    width = 0.8 / n
    for k, row in enumerate(rows):
        values = [float(row.get("metrics", {}).get(m, float("nan"))) for m in metrics]
        xs = [i + (k - (n - 1) / 2) * width for i in range(len(metrics))]
        ax.bar(xs, values, width=width, label=str(row.get("run_id", k)))
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels(metrics, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    if rows:
        ax.legend(fontsize=8)
    return _save(fig, path)
