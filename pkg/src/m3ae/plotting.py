"""Static figures written next to the CSV outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REGION_COLORS = {"WT": "#1b9e77", "TC": "#d95f02", "ET": "#7570b3"}
COLW = 3.45


def _figure(ncols: float, aspect_ratio: float = 0.618, fontsize: int = 8):
    matplotlib.rcParams.update({"font.size": fontsize, "axes.linewidth": 0.5})
    fig, ax = plt.subplots(figsize=(ncols * COLW, ncols * COLW * aspect_ratio))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_subset_dsc(summary_rows, path) -> Path:
    """Grouped bars of mean DSC per modality subset and region, with std whiskers."""
    rows = list(summary_rows)
    names = [r["subset"] for r in rows]
    x = np.arange(len(rows))
    width = 0.27
    fig, ax = _figure(2, aspect_ratio=0.4)
    for k, region in enumerate(REGION_COLORS):
        means = [r[f"{region}_dsc_mean"] for r in rows]
        stds = [r[f"{region}_dsc_std"] for r in rows]
        ax.bar(x + (k - 1) * width, means, width, yerr=stds, color=REGION_COLORS[region],
               label=region, error_kw={"elinewidth": 0.5, "capsize": 1})
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("DSC")
    ax.legend(ncol=3, frameon=False, loc="lower right")
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return _save(fig, path)


def plot_losses(csv_path, path) -> Path:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = _figure(1)
    epochs = np.array([int(r["epoch"]) for r in rows])
    for key in rows[0]:
        if key in ("step", "epoch", "lr", "L_reg"):
            continue
        values = np.array([float(r[key]) for r in rows])
        per_epoch = [values[epochs == e].mean() for e in np.unique(epochs)]
        ax.plot(np.unique(epochs) + 1, per_epoch, label=key, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)


def substitute_montage(volume: np.ndarray, path, names=("flair", "t1", "t1c", "t2")) -> Path:
    """Axial, coronal and sagittal centre slices of every channel of an N x D x H x W image."""
    n = volume.shape[0]
    fig, axes = plt.subplots(3, n, figsize=(1.3 * n, 3.9), squeeze=False)
    centre = [s // 2 for s in volume.shape[1:]]
    for m in range(n):
        vol = volume[m]
        lo, hi = np.percentile(vol, [1, 99])
        slices = (vol[centre[0]], vol[:, centre[1]], vol[:, :, centre[2]])
        for r, img in enumerate(slices):
            ax = axes[r, m]
            ax.imshow(img, cmap="gray", vmin=lo, vmax=hi if hi > lo else lo + 1)
            ax.set_xticks([])
            ax.set_yticks([])
        axes[0, m].set_title(names[m] if m < len(names) else str(m), fontsize=8)
    return _save(fig, path)
