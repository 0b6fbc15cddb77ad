"""Report figures rendered next to the delimited outputs.

Every figure goes straight to a file via the Agg backend; nothing here opens
a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402


def loss_curve(step_rows: list[dict], path) -> Path:
    """Per-step training loss, one line per phase."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for phase in sorted({r["phase"] for r in step_rows}):
        rows = [r for r in step_rows if r["phase"] == phase]
        ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], label=phase, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def attention_heatmap(matrix: np.ndarray, path, title: str,
                      xlabel: str = "keys", ylabel: str = "queries") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def bench_curves(rows: list[dict], path) -> Path:
    """Forward FLOPs vs image area for both configurations."""
    fig, ax = plt.subplots(figsize=(7, 4))
    areas = [r["height"] * r["width"] for r in rows]
    ax.plot(areas, [r["flops_encoder_free"] for r in rows], "o-", label="encoder-free")
    ax.plot(areas, [r["flops_encoder_based"] for r in rows], "s-", label="encoder-based")
    ax.set_xlabel("image area (px)")
    ax.set_ylabel("forward MACs")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
