"""Figures written next to the CSV/JSON reports. Everything renders with Agg to files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # fixed metadata keeps reruns byte-identical
    "svg.hashsalt": "framers",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def reconstruction_grid(examples: Sequence[tuple], path, temporal_patch: int = 2) -> tuple[Path, tuple[int, int]]:
    """One block of three rows per clip: original, masked input, reconstruction.

    ``examples`` holds ``(clip_id, original, reconstructed, kept_slots)`` with
    clips as ``[t, h, w, c]`` arrays in [0, 1]. Masked frames are drawn black.
    Returns the written path and the ``(rows, frames)`` grid shape.
    """
    n_frames = examples[0][1].shape[0]
    rows = 3 * len(examples)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, n_frames, figsize=(0.8 * n_frames, 0.85 * rows), squeeze=False)
        for i, (clip_id, orig, recon, kept) in enumerate(examples):
            keep_frames = {t for s in kept for t in range(s * temporal_patch, (s + 1) * temporal_patch)}
            masked = np.stack([f if t in keep_frames else np.zeros_like(f) for t, f in enumerate(orig)])
            for r, (label, clip) in enumerate((("original", orig), ("masked", masked), ("reconstructed", recon))):
                for t in range(n_frames):
                    ax = axes[3 * i + r, t]
                    ax.imshow(np.clip(clip[t], 0, 1), interpolation="nearest")
                    ax.set_xticks([])
                    ax.set_yticks([])
                    for spine in ax.spines.values():
                        spine.set_visible(t in keep_frames)
                        spine.set_color("tab:red")
                axes[3 * i + r, 0].set_ylabel(label if r else f"{clip_id}\n{label}", rotation=0, ha="right", va="center")
        fig.subplots_adjust(wspace=0.05, hspace=0.05, left=0.12, right=0.99, top=0.99, bottom=0.01)
        return _save(fig, path), (rows, n_frames)


def policy_bars(summary: Sequence[dict], path) -> Path:
    names = [r["policy"] for r in summary]
    mse = [r["mean_mse"] for r in summary]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        ax.bar(names, mse, color="0.4")
        ax.set_ylabel("mean MSE")
        ax.set_title("reconstruction error by key-frame policy")
        fig.tight_layout()
        return _save(fig, path)


def loss_curve(losses: Sequence[float], path, title: str = "pretraining loss") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        ax.semilogy(np.arange(1, len(losses) + 1), losses, lw=0.8, color="k")
        ax.set_xlabel("step")
        ax.set_ylabel("masked MSE")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def selector_curves(trace: Sequence[dict], path) -> Path:
    epochs = [r["epoch"] for r in trace]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 2.6))
        ax.plot(epochs, [r["top1"] for r in trace], label="top-1")
        ax.plot(epochs, [r["top5"] for r in trace], label="top-5")
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation accuracy")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
