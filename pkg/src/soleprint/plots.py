"""Figure rendering for reports: every CLI report path drops a PNG next to
its CSV/JSON output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .experiments import ScenarioReport
from .morphometrics import AlignedEnsemble
from .raster import quantize


def scenario_accuracy_figure(reports: list[ScenarioReport], path: str | Path) -> None:
    """Bar chart of per-scenario accuracy and age error."""
    rows = sorted(reports, key=lambda r: r.scenario_id)
    ids = [r.scenario_id for r in rows]
    fig, (ax_acc, ax_mae) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    acc = [100.0 * r.accuracy if r.accuracy is not None else np.nan for r in rows]
    ax_acc.bar(ids, acc, color="#3465a4")
    jack = [(r.scenario_id, 100.0 * r.jackknife) for r in rows if r.jackknife is not None]
    if jack:
        ax_acc.scatter(*zip(*jack), color="#cc0000", zorder=3, label="jackknifed")
        ax_acc.legend(loc="lower right", fontsize=8)
    ax_acc.set_ylabel("sex accuracy [%]")
    ax_acc.set_ylim(0, 100)
    err = [r.mae_years if r.mae_years is not None else np.nan for r in rows]
    ax_mae.bar(ids, err, color="#73d216")
    ax_mae.set_ylabel("age MAE [years]")
    ax_mae.set_xlabel("scenario")
    ax_mae.set_xticks(ids)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curves_figure(history: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for split, color in (("train", "#3465a4"), ("val", "#cc0000")):
        rows = [r for r in history if r["split"] == split]
        if rows:
            ax.plot([r["epoch"] for r in rows], [r["combined"] for r in rows],
                    color=color, label=split)
    stage_change = [r["epoch"] for r in history if r["stage"] == "finetune"]
    if stage_change:
        ax.axvline(min(stage_change) - 0.5, color="gray", linestyle=":", label="fine-tune start")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def landmark_scatter_figure(ensemble: AlignedEnsemble, path: str | Path) -> None:
    """Aligned landmark cloud with the mean shape on top."""
    fig, ax = plt.subplots(figsize=(5, 5))
    flat = ensemble.shapes.reshape(-1, 2)
    ax.scatter(flat[:, 0], flat[:, 1], s=4, alpha=0.25, color="#3465a4", linewidths=0)
    ax.scatter(ensemble.mean_shape[:, 0], ensemble.mean_shape[:, 1],
               s=30, color="#cc0000", zorder=3, label="mean shape")
    ax.set_aspect("equal")
    ax.invert_yaxis()  # image coordinates
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def variance_fractions_figure(fractions: np.ndarray, path: str | Path, top: int = 10) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    shown = fractions[:top]
    ax.bar(np.arange(1, len(shown) + 1), 100.0 * shown, color="#3465a4")
    cum = 100.0 * np.cumsum(shown)
    ax.plot(np.arange(1, len(shown) + 1), cum, "o-", color="#cc0000", label="cumulative")
    ax.set_xlabel("component")
    ax.set_ylabel("variance [%]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def tps_grid_figure(grid: np.ndarray, warped: np.ndarray, rows: int, cols: int,
                    path: str | Path) -> None:
    """Deformation grid: source lattice in gray, warped lattice in blue."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for pts, color, lw in ((grid, "0.8", 0.7), (warped, "#3465a4", 1.0)):
        lattice = pts.reshape(rows, cols, 2)
        for r in range(rows):
            ax.plot(lattice[r, :, 0], lattice[r, :, 1], color=color, linewidth=lw)
        for c in range(cols):
            ax.plot(lattice[:, c, 0], lattice[:, c, 1], color=color, linewidth=lw)
    ax.set_aspect("equal")
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def heatmap_overlay(image: np.ndarray, heatmap: np.ndarray, path: str | Path,
                    alpha: float = 0.5) -> None:
    """Alpha-blend a [0,1] heatmap over the input and write a PNG.

    Accepts either a single-channel image or composite channels (3, H, W);
    the overlay uses the channel mean as the grayscale base.
    """
    base = image.mean(axis=0) if image.ndim == 3 else image
    if base.shape != heatmap.shape:
        raise ValueError(f"image {base.shape} vs heatmap {heatmap.shape}")
    colors = matplotlib.colormaps["jet"](np.clip(heatmap, 0.0, 1.0))[..., :3]
    gray = np.repeat(base[..., None], 3, axis=2)
    blended = (1.0 - alpha) * gray + alpha * colors
    Image.fromarray(quantize(blended), mode="RGB").save(Path(path), format="PNG")


def squares_figure(image: np.ndarray, centers_px: list[tuple[float, float]],
                   side_px: int, path: str | Path) -> None:
    """Print with the sampling squares drawn on top."""
    fig, ax = plt.subplots(figsize=(5, 6))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    half = side_px / 2.0
    for cx, cy in centers_px:
        ax.add_patch(plt.Rectangle((cx - half, cy - half), side_px, side_px,
                                   fill=False, edgecolor="#cc0000", linewidth=1.2))
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
