"""Figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from hwsi.losses import LossBreakdown  # noqa: E402


def figure_path(csv_path, suffix: str = "") -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + suffix + ".png")


def plot_training_log(rows: list, path) -> Path:
    """Per-epoch mean of every loss component, one panel per stage."""
    stages = sorted({r["stage"] for r in rows})
    fig, axes = plt.subplots(1, len(stages), figsize=(5.5 * len(stages), 4), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        sub = [r for r in rows if r["stage"] == stage]
        epochs = sorted({r["epoch"] for r in sub})
        for key in LossBreakdown.FIELDS:
            means = [np.mean([r[key] for r in sub if r["epoch"] == e]) for e in epochs]
            ax.plot(epochs, means, label=key, lw=2.2 if key == "L_HCA" else 1.2)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_title(f"stage {stage}")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("epoch-mean loss")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_confusion(y_true, y_pred, classes: int, path, title: str = "zero-shot") -> Path:
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(conf, cmap="Blues")
    for i in range(classes):
        for j in range(classes):
            if conf[i, j]:
                ax.text(j, i, str(conf[i, j]), ha="center", va="center", fontsize=7)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_recall_curve(metrics: dict, path) -> Path:
    """Recall@K for both retrieval directions."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for direction in ("slide_to_report", "report_to_slide"):
        ks = sorted(int(k.rsplit("@", 1)[1]) for k in metrics if k.startswith(direction))
        ax.plot(ks, [metrics[f"{direction}_R@{k}"] for k in ks], marker="o", label=direction.replace("_", " "))
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_similarity(z, labels, path, title: str = "slide similarity") -> Path:
    """Cosine similarity of slide embeddings, sorted by label."""
    z = np.asarray(z, dtype=np.float64)
    order = np.argsort(np.asarray(labels), kind="stable")
    zn = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    sim = zn[order] @ zn[order].T
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(sim, cmap="viridis", vmin=-1, vmax=1)
    ax.set_title(title)
    ax.set_xlabel("slide (sorted by class)")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
