"""Friction-ridge sampling squares and texture-only inputs.

Squares of a fixed physical side (default 10 mm) sit midway between chosen
landmark pairs; from each square we take the black-pixel fraction, ingest
manually counted ridge totals, and build the tiled texture-only image used
when shape is withheld from the classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import raster
from .dataio import ManifestRecord
from .morphometrics import MM_PER_INCH, LandmarkSet
from .raster import FootprintImage

DEFAULT_SIDE_MM = 10.0


class RidgeFieldError(Exception):
    """Base class for sampling-square failures."""


class IndexOutOfRangeError(RidgeFieldError):
    """A landmark pair references a missing landmark index."""


class OutOfBoundsError(RidgeFieldError):
    """A sampling square reaches outside the image."""


class MissingCountsError(RidgeFieldError):
    """Record carries no manual ridge counts (reported as an exclusion)."""


@dataclass(frozen=True)
class SquaresConfig:
    """Landmark index pairs plus the square side in mm."""

    pairs: tuple[tuple[int, int], ...]
    side_mm: float = DEFAULT_SIDE_MM

    @staticmethod
    def from_json(path: str | Path) -> "SquaresConfig":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return SquaresConfig(
            pairs=tuple((int(i), int(j)) for i, j in payload["pairs"]),
            side_mm=float(payload.get("side_mm", DEFAULT_SIDE_MM)),
        )


@dataclass(frozen=True)
class SampleSquare:
    center_mm: tuple[float, float]
    side_mm: float
    pixels: np.ndarray  # extracted patch, (side_px, side_px)
    source_pair: tuple[int, int]


def patch_side_px(side_mm: float, ppi: float) -> int:
    """Pixel side of a physical square: round(side * ppi / 25.4)."""
    return int(round(side_mm * ppi / MM_PER_INCH))


def place_squares(
    lms: LandmarkSet, pairs: list[tuple[int, int]] | tuple[tuple[int, int], ...],
    side_mm: float = DEFAULT_SIDE_MM,
) -> list[tuple[float, float]]:
    """Square centers: the midpoint of each landmark pair, in pair order."""
    if side_mm <= 0:
        raise ValueError("side_mm must be positive")
    centers = []
    for i, j in pairs:
        if not (0 <= i < lms.k and 0 <= j < lms.k):
            raise IndexOutOfRangeError(f"pair ({i}, {j}) outside 0..{lms.k - 1}")
        mid = (lms.points[i] + lms.points[j]) / 2.0
        centers.append((float(mid[0]), float(mid[1])))
    return centers


def extract_square(
    img: FootprintImage,
    center_mm: tuple[float, float],
    side_mm: float = DEFAULT_SIDE_MM,
    source_pair: tuple[int, int] = (-1, -1),
) -> SampleSquare:
    """Copy the axis-aligned physical square centered at center_mm."""
    side_px = patch_side_px(side_mm, img.ppi)
    if side_px < 1:
        raise RidgeFieldError(f"square side {side_mm} mm is below one pixel at {img.ppi} ppi")
    px_per_mm = img.ppi / MM_PER_INCH
    cx = center_mm[0] * px_per_mm
    cy = center_mm[1] * px_per_mm
    x0 = int(round(cx - side_px / 2.0))
    y0 = int(round(cy - side_px / 2.0))
    if x0 < 0 or y0 < 0 or x0 + side_px > img.width or y0 + side_px > img.height:
        raise OutOfBoundsError(
            f"square pair {source_pair} at ({center_mm[0]:.1f}, {center_mm[1]:.1f}) mm "
            f"exceeds the {img.width}x{img.height} image"
        )
    patch = img.pixels[y0 : y0 + side_px, x0 : x0 + side_px].copy()
    return SampleSquare(
        center_mm=(float(center_mm[0]), float(center_mm[1])),
        side_mm=float(side_mm),
        pixels=patch,
        source_pair=tuple(source_pair),
    )


def extract_squares(
    img: FootprintImage, lms: LandmarkSet, config: SquaresConfig
) -> list[SampleSquare]:
    centers = place_squares(lms, config.pairs, config.side_mm)
    return [
        extract_square(img, center, config.side_mm, pair)
        for center, pair in zip(centers, config.pairs)
    ]


def black_fraction(square: SampleSquare, ink_threshold: float = 0.5) -> float:
    """Fraction of patch pixels darker than the ink threshold."""
    if square.pixels.size == 0:
        raise RidgeFieldError("empty patch")
    return float(np.count_nonzero(square.pixels < ink_threshold) / square.pixels.size)


def ridge_features(record: ManifestRecord) -> np.ndarray:
    """Per-square manual ridge counts followed by their total.

    Records without counts raise MissingCountsError; batch callers treat
    that as an exclusion, mirroring how faint prints were dropped rather
    than counted.
    """
    if record.ridge_counts is None:
        raise MissingCountsError(f"record {record.id!r} has no ridge counts")
    counts = np.asarray(record.ridge_counts, dtype=np.float64)
    return np.append(counts, counts.sum())


def ridge_feature_matrix(
    records: list[ManifestRecord],
) -> tuple[np.ndarray, list[str], list[str]]:
    """Stack ridge features for all countable records.

    Returns (features, ids, excluded_ids); excluded records are those with
    no counts.  Raises if countable records disagree on the square count.
    """
    rows, ids, excluded = [], [], []
    for record in records:
        try:
            rows.append(ridge_features(record))
            ids.append(record.id)
        except MissingCountsError:
            excluded.append(record.id)
    if rows and len({r.shape[0] for r in rows}) != 1:
        raise RidgeFieldError("records disagree on the number of sampling squares")
    features = np.array(rows) if rows else np.zeros((0, 0))
    return features, ids, excluded


def tile_grid(
    squares: list[SampleSquare], grid_shape: tuple[int, int], pad_value: float = 1.0
) -> np.ndarray:
    """Arrange patches row-major into a grid raster, background-padded.

    Patch pixels are copied verbatim (no resampling inside cells); trailing
    empty cells stay background.
    """
    rows, cols = grid_shape
    if rows * cols < len(squares):
        raise RidgeFieldError(f"{len(squares)} squares do not fit a {rows}x{cols} grid")
    if not squares:
        raise RidgeFieldError("no squares to tile")
    cell_h = max(s.pixels.shape[0] for s in squares)
    cell_w = max(s.pixels.shape[1] for s in squares)
    canvas = np.full((rows * cell_h, cols * cell_w), float(pad_value))
    for idx, square in enumerate(squares):
        r, c = divmod(idx, cols)
        h, w = square.pixels.shape
        canvas[r * cell_h : r * cell_h + h, c * cell_w : c * cell_w + w] = square.pixels
    return canvas


def default_grid_shape(n_squares: int) -> tuple[int, int]:
    cols = int(math.ceil(math.sqrt(n_squares)))
    rows = int(math.ceil(n_squares / cols))
    return rows, cols


def texture_tile(
    img: FootprintImage,
    squares: list[SampleSquare],
    grid_shape: tuple[int, int] | None = None,
    target_w: int = raster.COMPOSITE_WIDTH,
    target_h: int = raster.COMPOSITE_HEIGHT,
    kernel: str = "NEAREST",
) -> FootprintImage:
    """Letterboxed grid of sampling patches: the shape-free network input."""
    shape = grid_shape or default_grid_shape(len(squares))
    grid = FootprintImage(pixels=tile_grid(squares, shape), ppi=img.ppi, id=img.id)
    return raster.letterbox(grid, target_w, target_h, pad_value=1.0, kernel=kernel)
