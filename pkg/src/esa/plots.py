"""Figure rendering for report commands: PNGs written next to the CSV/JSON."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_recall_by_layer(rows: list[dict], path: str | Path) -> None:
    """rows: dicts with layer, mode, recall (one k per file)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    modes = sorted({r["mode"] for r in rows})
    for mode in modes:
        pts = sorted((r["layer"], r["recall"]) for r in rows if r["mode"] == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("layer")
    ax.set_ylabel("recall@k")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_needle_sweep(rows: list[dict], path: str | Path) -> None:
    """rows: dicts with epsilon, k, recall; one line per k."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in sorted({r["k"] for r in rows}):
        pts = sorted((r["epsilon"], r["recall"]) for r in rows if r["k"] == k)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s", label=f"k={k}")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("planted recall")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_loss(losses_by_layer: dict[int, list[float]], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for layer in sorted(losses_by_layer):
        epochs = range(1, len(losses_by_layer[layer]) + 1)
        ax.plot(epochs, losses_by_layer[layer], marker=".", label=f"layer {layer}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean squared score error")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
