"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .checkpoint import atomic_write  # noqa: E402

STYLE = {
    "figure.figsize": (4.5, 3.4),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "egc",
}

CLASS_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def new(nrows: int = 1, ncols: int = 1, **kw):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows=nrows, ncols=ncols, **kw)
    return fig, ax


def save(fig, path) -> Path:
    """PNG without timestamp metadata, so reruns are byte-identical."""
    buf = io.BytesIO()
    with plt.rc_context(STYLE):
        fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return Path(path)


def scatter(points: np.ndarray, path, labels=None, reference=None, title: str = "") -> Path:
    fig, ax = new()
    if reference is not None:
        ax.scatter(reference[:, 0], reference[:, 1], s=2, c="0.8", linewidths=0, label="data")
    if labels is None:
        ax.scatter(points[:, 0], points[:, 1], s=3, c="k", linewidths=0, label="samples")
    else:
        for c in np.unique(labels):
            sel = labels == c
            ax.scatter(points[sel, 0], points[sel, 1], s=3, linewidths=0, c=CLASS_COLORS[int(c) % len(CLASS_COLORS)], label=f"class {int(c)}")
    ax.set_aspect("equal")
    ax.set_xlim(-1, 1)
    ax.set_ylim(-1, 1)
    ax.legend(loc="upper right", markerscale=3, frameon=False)
    if title:
        ax.set_title(title)
    return save(fig, path)


def training_curves(rows, path) -> Path:
    it = np.array([r[0] for r in rows])
    fig, ax = new()
    ax.plot(it, [r[1] for r in rows], label="recon")
    ax.plot(it, [r[2] for r in rows], label="cross-entropy")
    ax.set_xlabel("iteration")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return save(fig, path)


def robustness(rows: list[dict], path) -> Path:
    fig, ax = new()
    keys = sorted({(r["model"], r["attack"]) for r in rows})
    for model, kind in keys:
        sel = [r for r in rows if r["model"] == model and r["attack"] == kind]
        ax.plot([r["epsilon"] for r in sel], [r["accuracy"] for r in sel], marker="o", ms=3, label=f"{model} / {kind}")
    ax.set_xlabel("L-inf budget")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return save(fig, path)


def energy_profile(rows, path, expected: float | None = None) -> Path:
    fig, ax = new()
    ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="o", ms=3)
    if expected is not None:
        ax.axvline(expected, color="0.5", ls="--", lw=1)
    ax.set_xlabel("mean |noise|")
    ax.set_ylabel("log unnormalised density")
    return save(fig, path)


def density_grid(matrix: np.ndarray, extent, path, title: str = "") -> Path:
    fig, ax = new()
    im = ax.imshow(matrix.T, origin="lower", extent=extent, cmap="viridis", aspect="auto")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    return save(fig, path)


def image_grid(images: np.ndarray, path, ncols: int = 8) -> Path:
    n = len(images)
    nrows = max(1, (n + ncols - 1) // ncols)
    fig, axes = new(nrows, ncols, squeeze=False, figsize=(ncols * 0.8, nrows * 0.8))
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i].reshape(images[i].shape[-2:]), -1, 1), cmap="gray", vmin=-1, vmax=1)
    return save(fig, path)
