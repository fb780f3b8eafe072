"""Report figures, rendered to files next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import LatencyStats, ThresholdCurve

__all__ = ["save_threshold_curve", "save_training_curves", "save_latency_histogram"]


def save_threshold_curve(curve: ThresholdCurve, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(curve.thresholds, 100.0 * curve.f1, lw=1.5, label="F1")
    denom_p = np.maximum(curve.tp + curve.fp, 1)
    denom_r = np.maximum(curve.tp + curve.fn, 1)
    ax.plot(curve.thresholds, 100.0 * curve.tp / denom_p, lw=1.0, ls="--", label="precision")
    ax.plot(curve.thresholds, 100.0 * curve.tp / denom_r, lw=1.0, ls=":", label="recall")
    best = int(np.argmax(curve.f1))
    ax.axvline(curve.thresholds[best], color="gray", lw=0.8)
    ax.set_xlabel("threshold")
    ax.set_ylabel("percent")
    ax.set_title(f"threshold sweep (MaxF = {100.0 * curve.f1[best]:.2f}%)")
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(str(path), dpi=130)
    plt.close(fig)


def save_training_curves(history: Sequence[dict], path: str | Path) -> None:
    if not history:
        return
    steps = [row["iteration"] for row in history]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, [row["total"] for row in history], lw=1.2, label="total")
    for key, style in (("main", "--"), ("bce", ":"), ("lovasz", ":"), ("focal", ":")):
        if key in history[0]:
            ax1.plot(steps, [row[key] for row in history], lw=0.9, ls=style, label=key)
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1.grid(alpha=0.3)
    ax2.plot(steps, [row["lr"] for row in history], lw=1.2, color="tab:green")
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("iteration")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(str(path), dpi=130)
    plt.close(fig)


def save_latency_histogram(stats: LatencyStats, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(stats.samples_ms, bins=min(30, max(5, stats.iters // 2)), color="tab:blue", alpha=0.8)
    for value, label, color in (
        (stats.mean_ms, f"mean {stats.mean_ms:.1f} ms", "tab:red"),
        (stats.median_ms, f"median {stats.median_ms:.1f} ms", "tab:orange"),
        (stats.p95_ms, f"p95 {stats.p95_ms:.1f} ms", "gray"),
    ):
        ax.axvline(value, color=color, lw=1.0, label=label)
    ax.set_xlabel("forward latency (ms)")
    ax.set_ylabel("count")
    ax.set_title(f"{stats.iters} timed forwards, {stats.fps:.2f} FPS")
    ax.legend()
    fig.tight_layout()
    fig.savefig(str(path), dpi=130)
    plt.close(fig)
