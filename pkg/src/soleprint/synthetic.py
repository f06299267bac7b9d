"""Bundled synthetic benchmark: two-population ellipse "footprints".

The generator draws solid-core ellipses on a fixed page.  Population size
dimorphism is planted directly: male outlines are longer than female ones by
a configurable ratio (default 1.07, matching the ~7% human stature gap), with
a small extra shape difference in the width/length ratio.  Texture is a band
of thin concentric ink ridges whose spacing also differs by sex, so the
texture-only and texture-free pipelines have something real to work with.

Because every page has identical dimensions, the constant-scale composite
path preserves relative print size and the planted size signal survives into
the network inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import (
    FEMALE,
    MALE,
    DatasetManifest,
    DatasetSplit,
    ManifestRecord,
    split_dataset,
)
from .morphometrics import MM_PER_INCH, LandmarkSet
from .raster import FootprintImage
from .ridgefields import SquaresConfig


@dataclass(frozen=True)
class SyntheticParams:
    page_w: int = 240
    page_h: int = 300
    ppi: float = 25.4  # 1 px per mm
    length_female: float = 196.0  # px, mean outline length
    dimorphism: float = 1.07  # male/female length ratio
    length_sd: float = 3.0
    width_ratio_female: float = 0.42
    width_ratio_male: float = 0.40
    width_ratio_sd: float = 0.008
    core_fraction: float = 0.8  # solid ink inside this normalized radius
    ridge_spacing_female: float = 4.0  # px between ridge rings
    ridge_spacing_male: float = 5.0
    ridge_width: float = 2.0
    landmark_count: int = 18
    missing_counts_fraction: float = 0.1


# Landmark pairs whose midpoints fall in the ridge band of the ellipse.
SEVEN_SQUARE_PAIRS = ((0, 1), (2, 3), (5, 6), (8, 9), (11, 12), (14, 15), (16, 17))
THREE_SQUARE_PAIRS = ((1, 2), (7, 8), (13, 14))

# Benchmark settings: small enough to train in about a minute per seed on one
# CPU core, large enough that the planted 7% size gap is comfortably learned.
BENCHMARK_NET = {"input_w": 96, "input_h": 120, "widths": (8, 16, 32), "hidden": 32}
BENCHMARK_TRAIN = {
    "epochs_head": 2,
    "epochs_finetune": 8,
    "lr_head": 1e-3,
    "lr_finetune": 1e-3,  # training from scratch, not fine-tuning a pretrained net
    "batch_size": 32,
    "dropout_rate": 0.25,
}


@dataclass(frozen=True)
class SyntheticDataset:
    manifest: DatasetManifest
    images: dict[str, FootprintImage]
    landmarks: dict[str, LandmarkSet]  # mm
    split: DatasetSplit
    squares: SquaresConfig
    params: SyntheticParams


def _ellipse_print(
    params: SyntheticParams,
    length: float,
    width_ratio: float,
    cx: float,
    bottom: float,
    spacing: float,
    textured: bool,
) -> np.ndarray:
    b = length / 2.0
    a = b * width_ratio  # width = length * width_ratio, so a = b * ratio
    cy = bottom - b
    yy, xx = np.mgrid[0 : params.page_h, 0 : params.page_w]
    rho = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
    page = np.ones((params.page_h, params.page_w))
    page[rho <= params.core_fraction] = 0.0
    if textured:
        band = (rho > params.core_fraction) & (rho <= 1.0)
        radial_px = (rho - params.core_fraction) * b
        rings = np.mod(radial_px, spacing) < params.ridge_width
        page[band & rings] = 0.0
    return page


def _ellipse_landmarks(
    params: SyntheticParams,
    length: float,
    width_ratio: float,
    cx: float,
    bottom: float,
    rng: np.random.Generator,
) -> np.ndarray:
    b = length / 2.0
    a = b * width_ratio
    cy = bottom - b
    angles = 2.0 * np.pi * np.arange(params.landmark_count) / params.landmark_count
    jitter = 1.0 + rng.normal(0.0, 0.004, size=params.landmark_count)
    x = cx + a * np.cos(angles) * jitter
    y = cy + b * np.sin(angles) * jitter
    return np.column_stack([x, y])  # px


def make_benchmark(
    n: int = 400,
    seed: int = 42,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    textured: bool = True,
    params: SyntheticParams = SyntheticParams(),
) -> SyntheticDataset:
    """Generate a balanced synthetic cohort with landmarks and ridge counts."""
    rng = np.random.default_rng(seed)
    px_to_mm = MM_PER_INCH / params.ppi
    records: list[ManifestRecord] = []
    images: dict[str, FootprintImage] = {}
    landmarks: dict[str, LandmarkSet] = {}
    for i in range(n):
        rid = f"syn{i:04d}"
        female = i % 2 == 0
        mean_length = params.length_female * (1.0 if female else params.dimorphism)
        length = float(rng.normal(mean_length, params.length_sd))
        width_ratio = float(
            rng.normal(
                params.width_ratio_female if female else params.width_ratio_male,
                params.width_ratio_sd,
            )
        )
        cx = params.page_w / 2.0 + rng.uniform(-6.0, 6.0)
        bottom = params.page_h - 15.0 + rng.uniform(-3.0, 3.0)
        spacing = params.ridge_spacing_female if female else params.ridge_spacing_male
        page = _ellipse_print(params, length, width_ratio, cx, bottom, spacing, textured)
        images[rid] = FootprintImage(pixels=page, ppi=params.ppi, id=rid)
        pts_px = _ellipse_landmarks(params, length, width_ratio, cx, bottom, rng)
        landmarks[rid] = LandmarkSet(points=pts_px * px_to_mm, id=rid)
        if rng.random() >= params.missing_counts_fraction:
            base = 17.5 if female else 15.8
            counts = tuple(
                int(max(0, round(rng.normal(base, 1.2)))) for _ in THREE_SQUARE_PAIRS
            )
        else:
            counts = None
        records.append(
            ManifestRecord(
                id=rid,
                image_path=f"{rid}.png",
                sex=FEMALE if female else MALE,
                age=int(np.clip(round(16 + 65 * rng.beta(2.0, 3.0)), 16, 81)),
                side="right",
                source="synthetic",
                ridge_counts=counts,
            )
        )
    manifest = DatasetManifest(records=tuple(records))
    split = split_dataset(manifest, ratios=ratios, seed=seed)
    squares = SquaresConfig(pairs=SEVEN_SQUARE_PAIRS, side_mm=10.0)
    return SyntheticDataset(
        manifest=manifest,
        images=images,
        landmarks=landmarks,
        split=split,
        squares=squares,
        params=params,
    )


def discriminative_region(
    inputs: np.ndarray, sex: np.ndarray, threshold: float = 0.25, dilate_px: int = 8
) -> np.ndarray:
    """Mask of pixels whose class-mean intensities differ most.

    This is the planted discriminative region: with everything else jittered
    independently of sex, only the size/shape band between the two class-mean
    outlines separates the populations.  The mask is dilated so the check is
    fair to heatmaps at the network's coarse spatial resolution.
    """
    female = inputs[sex == 1.0].mean(axis=0).mean(axis=0)
    male = inputs[sex == 0.0].mean(axis=0).mean(axis=0)
    diff = np.abs(female - male)
    if diff.max() <= 0:
        return np.zeros_like(diff, dtype=bool)
    mask = diff >= threshold * diff.max()
    if dilate_px > 0:
        pad = np.pad(mask, dilate_px)
        acc = np.zeros_like(mask)
        h, w = mask.shape
        for dy in range(2 * dilate_px + 1):
            for dx in range(2 * dilate_px + 1):
                acc |= pad[dy : dy + h, dx : dx + w]
        mask = acc
    return mask
