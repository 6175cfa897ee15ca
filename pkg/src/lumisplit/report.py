"""Report figures rendered next to the delimited outputs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def energy_history_figure(path: str | os.PathLike, result) -> None:
    """Per-frame accepted-step energy traces from a pipeline run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    offset = 0
    for frame_idx, records in enumerate(result.records):
        energies = [r["energy_after"] for r in records if r["accepted"]]
        xs = np.arange(offset, offset + len(energies))
        if len(energies):
            ax.plot(xs, energies, lw=1.2,
                    label=f"frame {frame_idx + 1}" if frame_idx < 6 else None)
        offset += max(len(energies), 1)
    ax.set_xlabel("accepted iteration (cumulative)")
    ax.set_ylabel("energy")
    ax.set_yscale("log")
    if any(len(r) for r in result.records):
        ax.legend(fontsize=7, ncol=3, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def ablation_figure(path: str | os.PathLike, results: dict) -> None:
    """Per-frame LMSE curves, one line per energy variant."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, scores in results.items():
        if scores is None:
            continue
        ax.plot(np.arange(1, len(scores) + 1), scores, marker=".",
                lw=1.2, label=f"{name} (mean {np.mean(scores):.4f})")
    ax.set_xlabel("frame")
    ax.set_ylabel("LMSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def palette_figure(path: str | os.PathLike, palette) -> None:
    """Swatch strip of the base colors (display-gamma encoded)."""
    K = palette.K
    fig, axes = plt.subplots(1, K, figsize=(1.2 * K, 1.4), squeeze=False)
    for k in range(K):
        swatch = np.clip(palette.colors[k], 0, 1) ** (1 / 2.2)
        axes[0, k].imshow(swatch[None, None, :].repeat(8, 0).repeat(8, 1))
        axes[0, k].set_title(f"b{k + 1}", fontsize=8)
        axes[0, k].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
