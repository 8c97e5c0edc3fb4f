"""Matplotlib figure rendering for training logs, eval reports, and heatmaps.

Matplotlib is imported lazily with the Agg backend so headless runs and
fast CLI paths never pay for it unless a figure is actually written.
"""
from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def save_loss_curve(records: Sequence[dict], path) -> None:
    """Loss and foreground-MSE trajectories over epochs."""
    if not records:
        return
    plt = _plt()
    epochs = [r["epoch"] for r in records]
    losses = [r["loss"] for r in records]
    fmses = [r["fmse"] for r in records]
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(epochs, losses, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss", color="tab:blue")
    ax1.set_yscale("log")
    ax2 = ax1.twinx()
    ax2.plot(epochs, fmses, color="tab:red", label="train fMSE")
    ax2.set_ylabel("fMSE (0-255)", color="tab:red")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(names: List[str], psnrs: List[float], fmses: List[float], path) -> None:
    """Per-sample PSNR bars with fMSE annotations."""
    plt = _plt()
    finite = [0.0 if math.isinf(p) else p for p in psnrs]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(names) + 2), 3.5))
    bars = ax.bar(range(len(names)), finite, color="tab:blue")
    for i, (bar, psnr) in enumerate(zip(bars, psnrs)):
        label = "inf" if math.isinf(psnr) else f"{fmses[i]:.0f}"
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(), label,
                ha="center", va="bottom", fontsize=7)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_overlay(image_hw3: np.ndarray, heat_hw: np.ndarray, path,
                         title: str = "") -> None:
    """Heatmap blended over the composite image."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.imshow(np.clip(image_hw3, 0, 1))
    im = ax.imshow(heat_hw, cmap="inferno", alpha=0.55, vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
