"""Figures for evaluation reports, rendered off-screen to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_cumulative(curves: dict, path, xlabel="distance (m)"):
    """One cumulative-distribution line per label; ``curves[label] = (thresholds, fractions)``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (thr, frac) in curves.items():
        ax.plot(thr, 100.0 * np.asarray(frac), label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("vertices within distance (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_frame_errors(series: dict, path, ylabel="distance (m)"):
    """Per-frame mean with a one-standard-deviation band; ``series[label] = (n, 2)`` array."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, stats in series.items():
        stats = np.asarray(stats)
        x = np.arange(1, len(stats) + 1)
        ax.plot(x, stats[:, 0], marker="o", ms=3, label=label)
        ax.fill_between(x, stats[:, 0] - stats[:, 1], stats[:, 0] + stats[:, 1], alpha=0.2)
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
