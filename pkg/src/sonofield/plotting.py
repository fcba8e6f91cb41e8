"""Matplotlib figures written next to the command-line outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _show(ax, image: np.ndarray, title: str, **kw) -> None:
    # frames are stored W x D; display depth downwards
    im = ax.imshow(np.asarray(image).T, aspect="auto", **kw)
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    return im


def plot_maps(maps: Mapping[str, np.ndarray], path: str | Path, image: np.ndarray | None = None) -> None:
    """One panel per parameter map, optionally preceded by the rendered frame."""
    panels = ([("rendered", image)] if image is not None else []) + list(maps.items())
    fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 3.2))
    for ax, (name, m) in zip(np.atleast_1d(axes), panels):
        if name == "rendered":
            _show(ax, m, name, cmap="gray", vmin=0, vmax=1)
        else:
            im = _show(ax, m, name, cmap="viridis")
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_eval(rows: Sequence[dict], path: str | Path) -> None:
    """Per-frame SSIM along each evaluated sweep."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in rows:
        ax.plot(r["per_frame"], label=f"{r['sweep']} ({r['view']}), median {r['median_ssim']:.3f}")
    ax.set_xlabel("frame")
    ax.set_ylabel("SSIM")
    ax.set_ylim(min(0.0, min((min(r["per_frame"]) for r in rows), default=0.0)), 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_comparison(frames: Mapping[str, np.ndarray], path: str | Path, mask: np.ndarray | None = None) -> None:
    """Side-by-side frames (e.g. reference, rendered, baseline, compounded) with an optional region outline."""
    fig, axes = plt.subplots(1, len(frames), figsize=(2.4 * len(frames), 3.2))
    for ax, (name, f) in zip(np.atleast_1d(axes), frames.items()):
        _show(ax, f, name, cmap="gray", vmin=0, vmax=1)
        if mask is not None and mask.any():
            ax.contour(np.asarray(mask).T.astype(float), levels=[0.5], colors="r", linewidths=0.7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
