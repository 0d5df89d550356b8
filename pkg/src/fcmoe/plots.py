"""Figure rendering for training runs, reports, and ablations.

All figures are written straight to image files with the Agg backend, so
plotting works headless. Figures are a presentation layer only: every value
they show comes from the CSV/JSON outputs written next to them.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .interpret import InterpretReport
from .training import EpochStats

_DPI = 120


def save_history_figure(history: list[EpochStats], path) -> Path:
    """Training curves: loss, validation AUROC, balance penalty, gate means."""
    if not history:
        raise ValueError("history is empty")
    epochs = [row.epoch for row in history]
    n_experts = len(history[0].gate_means)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))

    axes[0, 0].plot(epochs, [row.train_loss for row in history], color="tab:blue")
    axes[0, 0].set_title("training loss")
    axes[0, 1].plot(epochs, [row.val_auroc for row in history], color="tab:green")
    axes[0, 1].set_title("validation AUROC")
    axes[0, 1].set_ylim(0.0, 1.05)
    axes[1, 0].plot(epochs, [row.cv2 for row in history], color="tab:red")
    axes[1, 0].set_title("gate balance penalty (cv$^2$)")
    for e in range(n_experts):
        axes[1, 1].plot(epochs, [row.gate_means[e] for row in history], label=f"expert {e}")
    axes[1, 1].set_title("mean gate probability")
    axes[1, 1].set_ylim(0.0, 1.05)
    axes[1, 1].legend(loc="best", fontsize=8)
    for ax in axes.flat:
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)

    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_report_figure(report: InterpretReport, path) -> Path:
    """Per-expert ROI score bars plus the community rollup heatmap."""
    n_experts = len(report.experts)
    fig, axes = plt.subplots(1, n_experts + 1, figsize=(4 * (n_experts + 1), 4))
    axes = np.atleast_1d(axes)

    for e, expert in enumerate(report.experts):
        ax = axes[e]
        labels = [f"{r.roi}\n{r.community}" for r in expert.rois]
        ax.bar(range(len(expert.rois)), [r.score for r in expert.rois], color="tab:purple")
        ax.set_xticks(range(len(expert.rois)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_title(f"expert {expert.index} (gate {report.gate_probs[expert.index]:.3f})")
        ax.set_ylabel("score")

    ax = axes[-1]
    sources = list(report.rollup)
    targets = list(next(iter(report.rollup.values()))) if report.rollup else []
    grid = np.array([[report.rollup[s][t] for t in targets] for s in sources])
    if grid.size:
        image = ax.imshow(grid, cmap="viridis", aspect="auto")
        fig.colorbar(image, ax=ax, fraction=0.046)
        ax.set_xticks(range(len(targets)))
        ax.set_xticklabels(targets, rotation=45, ha="right", fontsize=7)
        ax.set_yticks(range(len(sources)))
        ax.set_yticklabels(sources, fontsize=7)
    ax.set_title(f"{report.subject_id}: community attention")

    fig.suptitle(
        f"{report.subject_id}  predicted={report.predicted_label}"
        f"  p(positive)={report.prob_asd:.3f}"
    )
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_ablation_figure(summary: dict[str, dict[str, float]], path) -> Path:
    """Mean with sd whiskers of test AUROC per decoder design.

    ``summary`` maps design name to {"mean": m, "sd": s}.
    """
    if not summary:
        raise ValueError("summary is empty")
    designs = list(summary)
    means = [summary[d]["mean"] for d in designs]
    sds = [summary[d]["sd"] for d in designs]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(designs, means, yerr=sds, capsize=6, color=["tab:gray", "tab:orange", "tab:blue"][: len(designs)])
    ax.set_ylabel("test AUROC")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("decoder ablation")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
