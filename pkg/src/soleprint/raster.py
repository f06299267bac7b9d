"""Pixel-level operations for footprint scans.

Everything here works on grayscale rasters with ink = 0.0 and background =
1.0.  The module covers bounding-box cropping, the four resampling kernels
(NEAREST, BILINEAR, HAMMING, BOX), aspect-preserving letterboxing onto the
512x640 canvas, binary morphology (erosion / dilation / opening), and the
three-channel composite construction where each color channel is the same
print rendered with a different resampling kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

COMPOSITE_WIDTH = 512
COMPOSITE_HEIGHT = 640

# Channel order of a standard composite: R, G, B.
COMPOSITE_KERNELS = ("NEAREST", "BILINEAR", "HAMMING")


class RasterError(Exception):
    """Base class for raster failures."""


class NoForegroundError(RasterError):
    """No pixel falls below the ink threshold."""


class CropBoundsError(RasterError):
    """Crop rectangle reaches outside the image."""


class NonBitonalError(RasterError):
    """Operation requires pixel values in {0, 1}."""


@dataclass(frozen=True)
class FootprintImage:
    """Calibrated grayscale raster (ink=0, background=1).

    pixels is a (height, width) float array with every value in [0, 1];
    ppi links pixel distances to physical millimetres (mm = px * 25.4 / ppi).
    """

    pixels: np.ndarray
    ppi: float
    id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("pixels must be a non-empty 2-D array")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.ppi > 0:
            raise ValueError("ppi must be positive")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def is_bitonal(self) -> bool:
        return bool(np.all((self.pixels == 0.0) | (self.pixels == 1.0)))

    def with_pixels(self, pixels: np.ndarray) -> "FootprintImage":
        return FootprintImage(pixels=pixels, ppi=self.ppi, id=self.id)


@dataclass(frozen=True)
class CompositeImage:
    """Three-channel network input; channels = three resampling kernels."""

    channels: np.ndarray  # (3, height, width), each value in [0, 1]
    provenance: tuple[str, str, str] = COMPOSITE_KERNELS
    id: str = ""

    def __post_init__(self) -> None:
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 3 or ch.shape[0] != 3:
            raise ValueError("channels must have shape (3, height, width)")
        if ch.min() < 0.0 or ch.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")
        object.__setattr__(self, "channels", ch)

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def height(self) -> int:
        return self.channels.shape[1]


def _hamming_window_sinc(x: np.ndarray) -> np.ndarray:
    # sinc(x) * (0.54 + 0.46 cos(pi x)) on |x| < 1, with the 0/0 limit at x=0.
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    sinc = np.ones_like(xi)
    nz = xi != 0.0
    sinc[nz] = np.sin(np.pi * xi[nz]) / (np.pi * xi[nz])
    out[inside] = sinc * (0.54 + 0.46 * np.cos(np.pi * xi))
    return out


@dataclass(frozen=True)
class ResampleKernel:
    """Separable convolution kernel: weight function plus support radius."""

    name: str
    support: float
    weight: Callable[[np.ndarray], np.ndarray] = field(repr=False)


KERNELS: dict[str, ResampleKernel] = {
    "BILINEAR": ResampleKernel(
        "BILINEAR", 1.0, lambda x: np.maximum(0.0, 1.0 - np.abs(x))
    ),
    "HAMMING": ResampleKernel("HAMMING", 1.0, _hamming_window_sinc),
    "BOX": ResampleKernel(
        "BOX", 0.5, lambda x: np.where(np.abs(x) <= 0.5, 1.0, 0.0)
    ),
}

KERNEL_NAMES = ("NEAREST", "BILINEAR", "HAMMING", "BOX")


def bounding_box(
    img: FootprintImage, ink_threshold: float = 0.5
) -> tuple[int, int, int, int]:
    """Smallest rectangle (x0, y0, x1, y1), inclusive, containing all ink.

    Ink means intensity strictly below ink_threshold.  Raises
    NoForegroundError when nothing is below the threshold.
    """
    mask = img.pixels < ink_threshold
    if not mask.any():
        raise NoForegroundError(
            f"no pixel below threshold {ink_threshold} in image {img.id!r}"
        )
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def crop(img: FootprintImage, rect: tuple[int, int, int, int]) -> FootprintImage:
    """Copy the inclusive rectangle (x0, y0, x1, y1) out of the image."""
    x0, y0, x1, y1 = rect
    if not (0 <= x0 <= x1 < img.width and 0 <= y0 <= y1 < img.height):
        raise CropBoundsError(f"rect {rect} outside {img.width}x{img.height} image")
    return img.with_pixels(img.pixels[y0 : y1 + 1, x0 : x1 + 1].copy())


def _nearest_indices(length_in: int, length_out: int) -> np.ndarray:
    # Output pixel centers mapped to source coordinates; the source pixel
    # containing the mapped point is the nearest one, with boundary points
    # (exact half distances) resolved toward +inf.
    coords = (np.arange(length_out) + 0.5) * (length_in / length_out)
    return np.clip(np.floor(coords).astype(int), 0, length_in - 1)


def _axis_weights(
    length_in: int, length_out: int, kernel: ResampleKernel
) -> tuple[np.ndarray, np.ndarray]:
    """Window indices and normalized weights for one resampling axis.

    When downscaling by factor f > 1 the kernel support is stretched to
    support*f and the weights renormalized (area-correct downsampling).
    Returns (indices, weights), each (length_out, taps); out-of-image taps
    carry zero weight.
    """
    scale = length_in / length_out
    filterscale = max(scale, 1.0)
    support = kernel.support * filterscale
    centers = (np.arange(length_out) + 0.5) * scale
    first = np.floor(centers - support).astype(int)
    taps = int(math.ceil(2.0 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    x = (idx + 0.5 - centers[:, None]) / filterscale
    weights = kernel.weight(x)
    weights[(idx < 0) | (idx >= length_in)] = 0.0
    totals = weights.sum(axis=1, keepdims=True)
    if np.any(totals == 0.0):
        raise RasterError(f"kernel {kernel.name} produced an empty tap window")
    weights /= totals
    return np.clip(idx, 0, length_in - 1), weights


def _resample_axis(arr: np.ndarray, length_out: int, kernel: ResampleKernel) -> np.ndarray:
    # Convolve along the last axis.
    idx, weights = _axis_weights(arr.shape[-1], length_out, kernel)
    return np.einsum("...ot,ot->...o", arr[..., idx], weights)


def resample_array(
    arr: np.ndarray, target_w: int, target_h: int, kernel: str = "BILINEAR"
) -> np.ndarray:
    """Resample a 2-D array to (target_h, target_w) with the named kernel."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target dimensions must be positive")
    if kernel == "NEAREST":
        rows = _nearest_indices(arr.shape[0], target_h)
        cols = _nearest_indices(arr.shape[1], target_w)
        return arr[np.ix_(rows, cols)]
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNEL_NAMES}")
    k = KERNELS[kernel]
    out = _resample_axis(arr, target_w, k)
    out = _resample_axis(out.T, target_h, k).T
    return np.clip(out, 0.0, 1.0)


def resample(
    img: FootprintImage, target_w: int, target_h: int, kernel: str = "BILINEAR"
) -> FootprintImage:
    """Resize to target_w x target_h using one of the four kernels."""
    return img.with_pixels(resample_array(img.pixels, target_w, target_h, kernel))


def letterbox(
    img: FootprintImage,
    target_w: int = COMPOSITE_WIDTH,
    target_h: int = COMPOSITE_HEIGHT,
    pad_value: float = 1.0,
    kernel: str = "BILINEAR",
    scale: float | None = None,
) -> FootprintImage:
    """Scale by a single factor, center on the canvas, pad with background.

    The default factor min(target_w/w, target_h/h) makes the content fill the
    canvas along its binding dimension; the footprint aspect ratio is never
    altered.  An explicit scale overrides the fit (the scaled content must
    still fit the canvas) so a whole dataset can share one factor and keep
    relative print sizes.
    """
    if scale is None:
        scale = min(target_w / img.width, target_h / img.height)
    content_w = max(1, round(img.width * scale))
    content_h = max(1, round(img.height * scale))
    if content_w > target_w or content_h > target_h:
        raise RasterError(
            f"scaled content {content_w}x{content_h} exceeds canvas {target_w}x{target_h}"
        )
    content = resample_array(img.pixels, content_w, content_h, kernel)
    canvas = np.full((target_h, target_w), float(pad_value))
    x0 = (target_w - content_w) // 2
    y0 = (target_h - content_h) // 2
    canvas[y0 : y0 + content_h, x0 : x0 + content_w] = content
    return img.with_pixels(canvas)


def _require_bitonal(img: FootprintImage, op: str) -> None:
    if not img.is_bitonal():
        raise NonBitonalError(f"{op} requires a bitonal image (values in {{0, 1}})")


def _neighborhood_filter(px: np.ndarray, radius: int, take_max: bool) -> np.ndarray:
    # Square window extreme with out-of-image positions counting as
    # background (1.0).  Separable: rows then columns.
    reducer = np.maximum if take_max else np.minimum
    out = px
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, constant_values=1.0)
        n = out.shape[axis]
        acc = padded.take(range(0, n), axis=axis)
        for off in range(1, 2 * radius + 1):
            acc = reducer(acc, padded.take(range(off, off + n), axis=axis))
        out = acc
    return out


def erode(img: FootprintImage, kernel_size: int = 3, iterations: int = 1) -> FootprintImage:
    """Shrink the ink foreground: a pixel stays ink only if its whole
    kernel_size x kernel_size neighborhood is ink (outside-image =
    background)."""
    _require_bitonal(img, "erode")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd integer")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    px = img.pixels
    for _ in range(iterations):
        px = _neighborhood_filter(px, kernel_size // 2, take_max=True)
    return img.with_pixels(px)


def dilate(img: FootprintImage, kernel_size: int = 3, iterations: int = 1) -> FootprintImage:
    """Grow the ink foreground: a pixel becomes ink if any neighbor is ink."""
    _require_bitonal(img, "dilate")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd integer")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    px = img.pixels
    for _ in range(iterations):
        px = _neighborhood_filter(px, kernel_size // 2, take_max=False)
    return img.with_pixels(px)


def detexture(img: FootprintImage, kernel_size: int = 3, iterations: int = 5) -> FootprintImage:
    """Morphological opening of the ink foreground (erode then dilate).

    Removes ridge-scale detail thinner than the accumulated structuring
    element while preserving the gross outline; idempotent.
    """
    return dilate(erode(img, kernel_size, iterations), kernel_size, iterations)


def invert(img: FootprintImage) -> FootprintImage:
    """Swap ink and background (v -> 1 - v)."""
    return img.with_pixels(1.0 - img.pixels)


def fit_scale(
    width: int, height: int, target_w: int = COMPOSITE_WIDTH, target_h: int = COMPOSITE_HEIGHT
) -> float:
    """Letterbox fit factor for a width x height raster."""
    return min(target_w / width, target_h / height)


def normalize_scale(
    width: int,
    height: int,
    fill_fraction: float = 0.95,
    target_w: int = COMPOSITE_WIDTH,
    target_h: int = COMPOSITE_HEIGHT,
) -> float:
    """Factor bringing the longer bounding-box side to fill_fraction of the
    corresponding canvas side.

    Applied dataset-wide this erases relative size: every print ends at the
    same fill.  Clamped to the plain fit for degenerate aspect ratios where
    the shorter side would overflow its canvas side.
    """
    if height >= width:
        scale = fill_fraction * target_h / height
    else:
        scale = fill_fraction * target_w / width
    return min(scale, fit_scale(width, height, target_w, target_h))


def normalize_size(
    img: FootprintImage,
    fill_fraction: float = 0.95,
    target_w: int = COMPOSITE_WIDTH,
    target_h: int = COMPOSITE_HEIGHT,
    kernel: str = "NEAREST",
) -> FootprintImage:
    """Rescale a bounding-box crop so its longer side sits at the standard
    fill, removing relative-size information across a dataset."""
    scale = normalize_scale(img.width, img.height, fill_fraction, target_w, target_h)
    return resample(
        img, max(1, round(img.width * scale)), max(1, round(img.height * scale)), kernel
    )


def make_composite(
    img: FootprintImage,
    width: int = COMPOSITE_WIDTH,
    height: int = COMPOSITE_HEIGHT,
    scale: float | None = None,
) -> CompositeImage:
    """Letterbox the print once per kernel and stack the three renderings.

    Channel order is fixed: R=NEAREST, G=BILINEAR, B=HAMMING.  For bitonal
    input the R channel keeps values in {0, 1} while G and B contain the
    intermediate grays produced by their kernels.
    """
    channels = np.stack(
        [
            letterbox(img, width, height, pad_value=1.0, kernel=name, scale=scale).pixels
            for name in COMPOSITE_KERNELS
        ]
    )
    return CompositeImage(channels=channels, provenance=COMPOSITE_KERNELS, id=img.id)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to 8-bit by round(v * 255)."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: FootprintImage, path: str | Path) -> None:
    """Write a grayscale PNG (8-bit, round(v*255))."""
    Image.fromarray(quantize(img.pixels), mode="L").save(Path(path), format="PNG")


def save_composite(composite: CompositeImage, path: str | Path) -> None:
    """Write an 8-bit RGB PNG with the fixed R,G,B kernel channel order."""
    rgb = np.moveaxis(quantize(composite.channels), 0, -1)
    Image.fromarray(rgb, mode="RGB").save(Path(path), format="PNG")
