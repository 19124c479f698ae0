"""PNG figures rendered next to the delimited reports (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(records, path: str | Path) -> Path:
    """Mean training loss and held-out accuracies per epoch."""
    path = Path(path)
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [r.epoch for r in records]
    ax_loss.plot(epochs, [r.loss.get("total", float("nan")) for r in records], marker="o")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    for name in ("coarse_acc", "fine_acc_conditional", "fine_acc_absolute"):
        ax_acc.plot(epochs, [getattr(r, name) for r in records], marker="o", label=name)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ablation(report, path: str | Path) -> Path:
    """Grouped bars of per-configuration median accuracies."""
    path = Path(path)
    names = [m["config"] for m in report.medians]
    metrics = ("coarse_acc", "fine_acc_conditional", "fine_acc_absolute")
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(names)), 4))
    for i, metric in enumerate(metrics):
        xs = [j + (i - 1) * width for j in range(len(names))]
        ax.bar(xs, [m[metric] for m in report.medians], width, label=metric)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("median accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_query_maps(q1, q2, path: str | Path, coarse_names=None) -> Path:
    """First channel of every level-1 and level-2 query map."""
    path = Path(path)
    n1, n2 = len(q1), len(q2)
    cols = max(n1, n2)
    fig, axes = plt.subplots(2, cols, figsize=(1.4 * cols, 3.2), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i in range(n1):
        axes[0, i].imshow(q1[i, 0], cmap="viridis")
        axes[0, i].set_title(coarse_names[i] if coarse_names else f"L1 {i}", fontsize=7)
    for s in range(n2):
        axes[1, s].imshow(q2[s, 0], cmap="viridis")
        axes[1, s].set_title(f"L2 slot {s}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
