"""Report figures rendered to files with the Agg backend.

Every function writes a PNG next to the delimited report output and returns
the path it wrote, so callers can record the file in the run manifest.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import CLASS_NAMES, MetricsReport
from .raster import HeightField, height_to_rgb
from .training import LogRow

_CLASS_COLORS = {"overall": "#4878d0", "buildings": "#d65f5f", "terrain": "#6acc64"}


def save_residual_histograms(
    path, per_class: dict, trunc: float, bins: int = 80, title: str | None = None
):
    """One panel of residual counts per cell class that has any cells."""
    live = [(name, np.asarray(r)) for name, r in per_class.items() if np.asarray(r).size]
    if not live:
        live = [("overall", np.zeros(1))]
    fig, axes = plt.subplots(1, len(live), figsize=(4.2 * len(live), 3.4), squeeze=False)
    span = trunc if math.isfinite(trunc) else max(float(np.abs(r).max()) for _, r in live)
    span = max(span, 1e-6)
    for ax, (name, residuals) in zip(axes[0], live):
        ax.hist(
            residuals,
            bins=bins,
            range=(-span, span),
            color=_CLASS_COLORS.get(name, "#888888"),
        )
        ax.set_title(f"{name} (n={residuals.size})")
        ax.set_xlabel("residual [m]")
        ax.set_ylabel("cells")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def save_loss_curves(path, logs: dict[str, list[LogRow]]):
    """Training loss per step plus validation MAE marks, one series per run."""
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9.2, 3.6))
    for name, rows in logs.items():
        steps = [r.step for r in rows if r.train_loss is not None]
        losses = [r.train_loss for r in rows if r.train_loss is not None]
        ax_loss.plot(steps, losses, label=name, linewidth=1.0)
        vsteps = [r.step for r in rows if r.val_mae is not None]
        vmaes = [r.val_mae for r in rows if r.val_mae is not None]
        ax_val.plot(vsteps, vmaes, marker="o", markersize=3, label=name)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_yscale("log")
    ax_val.set_xlabel("step")
    ax_val.set_ylabel("val MAE [m]")
    for ax in (ax_loss, ax_val):
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def save_method_comparison(path, reports: list[tuple[str, MetricsReport]]):
    """Grouped bar chart of per-class MAE for each method row."""
    methods = [name for name, _ in reports]
    x = np.arange(len(methods), dtype=float)
    width = 0.26
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(methods), 3.8))
    for k, cls in enumerate(CLASS_NAMES):
        maes = [report.classes()[cls].mae for _, report in reports]
        ax.bar(x + (k - 1) * width, maes, width, label=cls, color=_CLASS_COLORS[cls])
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("MAE [m]")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def save_height_map(path, field: HeightField, title: str | None = None):
    """Color-ramped rendering of a height raster with a colorbar."""
    valid = ~field.nodata_mask
    vmin = float(field.values[valid].min()) if valid.any() else 0.0
    vmax = float(field.values[valid].max()) if valid.any() else 1.0
    rgb = height_to_rgb(field, vmin, vmax)
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    extent = (
        field.origin_x,
        field.origin_x + field.width * field.cell_size,
        field.origin_y,
        field.origin_y + field.height * field.cell_size,
    )
    ax.imshow(rgb, extent=extent)
    mappable = plt.cm.ScalarMappable(norm=plt.Normalize(vmin, vmax))
    fig.colorbar(mappable, ax=ax, label="height [m]", fraction=0.046)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
