"""Figures rendered next to the delimited report/log outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_loss_curves(history: list, path, title: str) -> None:
    """Per-epoch loss curve(s); plots any extra *_loss series it finds."""
    epochs = [entry["epoch"] for entry in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [entry["loss"] for entry in history], marker="o", label="total")
    for key in ("ms_loss", "distill_loss"):
        if history and key in history[0]:
            ax.plot(epochs, [entry[key] for entry in history], marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_recall_curve(recalls: dict, path, title: str) -> None:
    """Recall@N (percent) against N."""
    ns = sorted(recalls)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, [recalls[n] for n in ns], marker="o")
    ax.set_xlabel("N")
    ax.set_ylabel("recall@N (%)")
    ax.set_ylim(0, 105)
    ax.set_xticks(ns)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
