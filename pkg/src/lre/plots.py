"""Matplotlib figure rendering for the CLI report paths."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(history: list[dict], path: str) -> None:
    """Loss curve plus whichever metrics the history carries."""
    epochs = [h["epoch"] for h in history]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(epochs, [h["loss"] for h in history], marker="o", ms=3)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    axes[0].grid(alpha=0.3)
    for key, label in (("top1", "top-1"), ("ebf", "EBF"), ("mif", "MiF")):
        if any(h.get(key) for h in history):
            axes[1].plot(epochs, [h.get(key, 0.0) for h in history],
                         marker="o", ms=3, label=label)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("metric")
    axes[1].set_ylim(0, 1.02)
    axes[1].grid(alpha=0.3)
    if axes[1].lines:
        axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cost_figure(reports: list[tuple[str, object]], path: str) -> None:
    """Bar chart of total FLOPs and attention-matrix elements per policy."""
    names = [n for n, _ in reports]
    flops = [r.flops_total for _, r in reports]
    elems = [r.matrix_elems for _, r in reports]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, vals, title in ((axes[0], flops, "total FLOPs"),
                            (axes[1], elems, "attention matrix elements")):
        ax.bar(names, vals, color="#4878a8")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=20)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
