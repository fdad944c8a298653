"""Figure emission for runs and diagnostics.

Everything draws through the Agg backend so commands work headless.  Each
function writes one file and returns its path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_history(history: list[dict], path) -> Path:
    """Loss components, retention rate, and unseen-domain Dice over time."""
    path = Path(path)
    iterations = [r["iteration"] for r in history]
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)

    for key in ("total", "L_x", "L_u"):
        axes[0].plot(iterations, [r[key] for r in history], label=key)
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)

    axes[1].plot(iterations, [r["mask_rate"] for r in history], color="tab:green")
    axes[1].set_ylabel("retention rate")
    axes[1].set_ylim(-0.05, 1.05)

    eval_points = [
        (r["iteration"], r["unseen_dice"]) for r in history if "unseen_dice" in r
    ]
    if eval_points:
        xs, ys = zip(*eval_points)
        axes[2].plot(xs, ys, marker="o", color="tab:red")
    axes[2].set_ylabel("unseen Dice (%)")
    axes[2].set_xlabel("iteration")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_branch_stats(
    site_name: str,
    domain_stats: dict[str, tuple[np.ndarray, np.ndarray]],
    path,
) -> Path:
    """Per-domain running mean and variance across one site's channels.

    ``domain_stats`` maps a domain label to (means, variances), one value per
    channel.  Separated curves indicate domain-dependent feature statistics.
    """
    path = Path(path)
    fig, (ax_mean, ax_var) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for label, (means, variances) in domain_stats.items():
        channels = np.arange(len(means))
        ax_mean.plot(channels, means, marker=".", label=label)
        ax_var.plot(channels, variances, marker=".", label=label)
    ax_mean.set_ylabel("running mean")
    ax_mean.set_title(site_name)
    ax_mean.legend(fontsize=8)
    ax_var.set_ylabel("running variance")
    ax_var.set_xlabel("channel")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pseudo_quality(
    rows: list[tuple[str, float, float]], path
) -> Path:
    """Paired bars: per-domain pseudo-label Dice, separate vs mixed
    normalization."""
    path = Path(path)
    labels = [r[0] for r in rows]
    individual = [r[1] for r in rows]
    mixed = [r[2] for r in rows]
    x = np.arange(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - width / 2, individual, width, label="per-domain branches")
    ax.bar(x + width / 2, mixed, width, label="mixed single branch")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("pseudo-label Dice")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(
    rows: list[tuple[str, float, float]], path
) -> Path:
    """Mean unseen-domain Dice per configuration with a min-max whisker."""
    path = Path(path)
    labels = [r[0] for r in rows]
    means = [r[1] for r in rows]
    spans = [r[2] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(x, means, yerr=spans, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("unseen Dice (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
