"""Landmark-based shape analysis.

Shapes are ordered 2-D landmark sets in millimetres.  The module provides
centroid size, ordinary and generalised Procrustes alignment, principal
component analysis of aligned residuals, thin-plate spline warps with
bending energy, and the full vector of inter-landmark distances.

Conventions (recorded because several are not forced by the method names):
full Procrustes throughout (every shape rescaled to unit centroid size),
rotations only (reflections excluded), and the thin-plate radial basis
U(r) = r^2 log r^2 with U(0) = 0.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MM_PER_INCH = 25.4


class MorphometricsError(Exception):
    """Base class for shape-analysis failures."""


class DegenerateShapeError(MorphometricsError):
    """Shape has zero centroid size (all landmarks coincident)."""


class SingularSystemError(MorphometricsError):
    """Thin-plate system is singular (degenerate landmark configuration)."""


class NonConvergenceWarning(UserWarning):
    """Generalised Procrustes hit the iteration cap."""


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered 2-D landmarks in mm."""

    points: np.ndarray  # (K, 2)
    id: str = ""

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError("points must be a (K>=3, 2) array")
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SimilarityTransform:
    """Similarity map x -> scale * R @ x + translation, det(R) = +1."""

    rotation: np.ndarray  # (2, 2)
    scale: float
    translation: np.ndarray  # (2,)
    distance: float  # full Procrustes distance between the unit-size shapes

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class AlignedEnsemble:
    """Result of generalised Procrustes alignment."""

    shapes: np.ndarray  # (N, K, 2) aligned, unit centroid size
    mean_shape: np.ndarray  # (K, 2), centroid at origin
    residuals: np.ndarray  # (N, 2K), row-major (x0, y0, x1, y1, ...)
    convergence_delta: float
    iterations: int
    converged: bool
    ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class TpsWarp:
    """Thin-plate spline carrying source exactly onto target."""

    source: np.ndarray  # (K, 2)
    target: np.ndarray  # (K, 2)
    affine: np.ndarray  # (2, 3): rows (a0, ax, ay) per output axis
    weights: np.ndarray  # (K, 2) non-affine coefficients
    bending_energy: float


def centroid_size(lms: LandmarkSet | np.ndarray) -> float:
    """Square root of summed squared landmark distances to the centroid."""
    pts = lms.points if isinstance(lms, LandmarkSet) else np.asarray(lms, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    return float(np.sqrt(np.sum(centered**2)))


def _center_and_scale(pts: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray, float]:
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    size = np.sqrt(np.sum(centered**2))
    if size < 1e-12:
        raise DegenerateShapeError(f"{label}: centroid size is zero")
    return centered / size, centroid, float(size)


def _optimal_rotation(unit_a: np.ndarray, unit_b: np.ndarray) -> tuple[np.ndarray, float]:
    """Rotation R (det +1) and scale minimizing ||unit_b @ R.T * s - unit_a||."""
    u, sigma, vt = np.linalg.svd(unit_b.T @ unit_a)
    d = np.sign(np.linalg.det(u @ vt))
    rotation = (u @ np.diag([1.0, d]) @ vt).T
    scale = float(sigma[0] + d * sigma[1])
    return rotation, scale


def procrustes_align(a: LandmarkSet, b: LandmarkSet) -> SimilarityTransform:
    """Similarity transform superimposing b onto a with least squares.

    Both shapes are centered and scaled to unit centroid size, the optimal
    rotation comes from the SVD of the cross-covariance (reflections
    excluded), and the reported distance is the full Procrustes distance
    sqrt(1 - (sum of corrected singular values)^2).
    """
    if a.k != b.k:
        raise MorphometricsError(f"landmark counts differ: {a.k} vs {b.k}")
    unit_a, cent_a, size_a = _center_and_scale(a.points, "first shape")
    unit_b, cent_b, size_b = _center_and_scale(b.points, "second shape")
    rotation, s = _optimal_rotation(unit_a, unit_b)
    distance = float(np.sqrt(max(0.0, 1.0 - s * s)))
    scale = s * size_a / size_b
    translation = cent_a - scale * rotation @ cent_b
    return SimilarityTransform(rotation=rotation, scale=scale, translation=translation, distance=distance)


def _orient_to_first_landmark(shapes: np.ndarray, mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Rotation gauge: turn the whole ensemble so the mean's first landmark
    # (or the farthest one if that is at the centroid) lies on the +x axis.
    anchor = mean[0]
    if np.hypot(*anchor) < 1e-9:
        anchor = mean[np.argmax(np.hypot(mean[:, 0], mean[:, 1]))]
    theta = np.arctan2(anchor[1], anchor[0])
    c, s = np.cos(-theta), np.sin(-theta)
    rot = np.array([[c, -s], [s, c]])
    return shapes @ rot.T, mean @ rot.T


def gpa(
    shapes: list[LandmarkSet],
    tol: float = 1e-10,
    max_iterations: int = 100,
) -> AlignedEnsemble:
    """Generalised Procrustes alignment of an ensemble.

    Every shape is centered and scaled to unit centroid size, then rotated to
    the evolving mean until the mean moves less than tol (Frobenius norm) or
    the iteration cap is reached; hitting the cap issues a
    NonConvergenceWarning rather than failing.  The final orientation is
    fixed by a deterministic gauge so that identically-shaped ensembles align
    to the same mean regardless of how the inputs were rotated.
    """
    if len(shapes) < 2:
        raise MorphometricsError("need at least 2 shapes")
    k = shapes[0].k
    if any(s.k != k for s in shapes):
        raise MorphometricsError("all shapes must share the landmark count")
    stack = np.empty((len(shapes), k, 2))
    for i, shape in enumerate(shapes):
        stack[i], _, _ = _center_and_scale(shape.points, f"shape {shape.id or i}")

    mean = stack[0].copy()
    delta = np.inf
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        for i in range(len(shapes)):
            rotation, _ = _optimal_rotation(mean, stack[i])
            stack[i] = stack[i] @ rotation.T
            # Re-normalize: rotation preserves size, but guard drift.
            stack[i] -= stack[i].mean(axis=0)
            stack[i] /= np.sqrt(np.sum(stack[i] ** 2))
        new_mean = stack.mean(axis=0)
        new_mean -= new_mean.mean(axis=0)
        # Pin the rotational gauge: a global rotation of the whole ensemble
        # is not shape change and must not stall the convergence test.
        gauge, _ = _optimal_rotation(mean, new_mean)
        stack = stack @ gauge.T
        new_mean = new_mean @ gauge.T
        delta = float(np.linalg.norm(new_mean - mean))
        mean = new_mean
        if delta < tol:
            break
    converged = delta < tol
    if not converged:
        warnings.warn(
            f"generalised Procrustes stopped after {max_iterations} iterations "
            f"(last mean change {delta:.3e})",
            NonConvergenceWarning,
        )
    stack, mean = _orient_to_first_landmark(stack, mean)
    residuals = (stack - mean).reshape(len(shapes), 2 * k)
    return AlignedEnsemble(
        shapes=stack,
        mean_shape=mean,
        residuals=residuals,
        convergence_delta=delta,
        iterations=iterations,
        converged=converged,
        ids=tuple(s.id for s in shapes),
    )


def shape_pca(ensemble: AlignedEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Principal components of the Procrustes residuals.

    Returns (components, fractions): unit-norm rows sorted by explained
    variance, fractions summing to 1 over the nonzero modes.  Component sign
    is fixed by making the largest-magnitude entry positive.
    """
    residuals = ensemble.residuals
    if residuals.shape[0] < 2:
        raise MorphometricsError("need more than one shape for PCA")
    centered = residuals - residuals.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if singular.size == 0 or singular[0] == 0.0:
        return np.zeros((0, residuals.shape[1])), np.zeros(0)
    keep = singular > singular[0] * 1e-9
    singular, vt = singular[keep], vt[keep]
    variances = singular**2
    fractions = variances / variances.sum()
    components = vt.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return components, fractions


def interlandmark_distances(lms: LandmarkSet | np.ndarray) -> np.ndarray:
    """All K(K-1)/2 Euclidean distances in fixed (i < j) order, in mm.

    Rotation/translation invariant but deliberately not scale invariant:
    this feature set encodes size.  Accepts a bare (K >= 2, 2) array too.
    """
    pts = lms.points if isinstance(lms, LandmarkSet) else np.asarray(lms, dtype=np.float64)
    if pts.shape[0] < 2:
        raise MorphometricsError("need at least two landmarks")
    iu, ju = np.triu_indices(pts.shape[0], k=1)
    return np.sqrt(np.sum((pts[iu] - pts[ju]) ** 2, axis=1))


def distance_pair_labels(k: int) -> list[str]:
    iu, ju = np.triu_indices(k, k=1)
    return [f"d{i}_{j}" for i, j in zip(iu, ju)]


def _tps_basis(r_squared: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log(r^2), continuously extended with U(0) = 0.
    out = np.zeros_like(r_squared)
    positive = r_squared > 0
    out[positive] = r_squared[positive] * np.log(r_squared[positive])
    return out


def tps_fit(source: LandmarkSet, target: LandmarkSet) -> TpsWarp:
    """Interpolating thin-plate spline from source to target landmarks.

    Solves the standard bordered system; the side conditions (weights sum to
    zero and are orthogonal to the source coordinates) hold by construction.
    Bending energy is the quadratic form of the non-affine weights, clamped
    at zero against roundoff.
    """
    if source.k != target.k:
        raise MorphometricsError(f"landmark counts differ: {source.k} vs {target.k}")
    src, dst = source.points, target.points
    k = source.k
    diff = src[:, None, :] - src[None, :, :]
    kernel = _tps_basis(np.sum(diff**2, axis=2))
    p = np.hstack([np.ones((k, 1)), src])
    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = kernel
    system[:k, k:] = p
    system[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = dst
    cond = np.linalg.cond(system)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystemError(
            f"thin-plate system is singular (condition number {cond:.3e}); "
            "source landmarks are degenerate"
        )
    solution = np.linalg.solve(system, rhs)
    weights = solution[:k]
    affine = solution[k:].T  # rows per axis: (a0, ax, ay)
    energy = float(np.trace(weights.T @ kernel @ weights))
    return TpsWarp(
        source=src.copy(),
        target=dst.copy(),
        affine=affine,
        weights=weights,
        bending_energy=max(0.0, energy),
    )


def tps_apply(warp: TpsWarp, points: np.ndarray) -> np.ndarray:
    """Evaluate the warp at arbitrary (M, 2) points."""
    pts = np.asarray(points, dtype=np.float64)
    diff = pts[:, None, :] - warp.source[None, :, :]
    basis = _tps_basis(np.sum(diff**2, axis=2))
    affine_part = warp.affine[:, 0] + pts @ warp.affine[:, 1:].T
    return affine_part + basis @ warp.weights


def tps_grid(
    warp: TpsWarp, rows: int = 20, cols: int = 20, margin: float = 0.05
) -> tuple[np.ndarray, np.ndarray]:
    """Regular grid over the source's bounding box and its deformed image."""
    lo = warp.source.min(axis=0)
    hi = warp.source.max(axis=0)
    span = hi - lo
    lo, hi = lo - margin * span, hi + margin * span
    xs = np.linspace(lo[0], hi[0], cols)
    ys = np.linspace(lo[1], hi[1], rows)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    return grid, tps_apply(warp, grid)


def save_deformation_grid(grid: np.ndarray, warped: np.ndarray, path: str | Path) -> None:
    """Write (x, y, x', y') rows for plotting a deformation grid."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "x_warped", "y_warped"])
        for (x, y), (xw, yw) in zip(grid, warped):
            writer.writerow([f"{x:.9g}", f"{y:.9g}", f"{xw:.9g}", f"{yw:.9g}"])


def load_landmarks(path: str | Path) -> dict[str, LandmarkSet]:
    """Read a landmark CSV into per-print landmark sets in mm.

    Format: a first line ``ppi,<value>`` giving the calibration, then a
    header ``id,index,x_px,y_px`` and one row per landmark.  Landmarks are
    ordered by their index column; coordinates convert to mm on load.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].lower().startswith("ppi"):
        raise MorphometricsError(f"{path}: expected leading 'ppi,<value>' row")
    ppi = float(lines[0].split(",")[1])
    reader = csv.reader(lines[1:])
    header = next(reader)
    if [h.strip() for h in header] != ["id", "index", "x_px", "y_px"]:
        raise MorphometricsError(f"{path}: header {header} != ['id','index','x_px','y_px']")
    byid: dict[str, list[tuple[int, float, float]]] = {}
    for row in reader:
        if not row:
            continue
        byid.setdefault(row[0], []).append((int(row[1]), float(row[2]), float(row[3])))
    factor = MM_PER_INCH / ppi
    out: dict[str, LandmarkSet] = {}
    for rid, entries in byid.items():
        entries.sort(key=lambda e: e[0])
        pts = np.array([[x * factor, y * factor] for _, x, y in entries])
        out[rid] = LandmarkSet(points=pts, id=rid)
    return out


def save_landmarks(
    landmarks: dict[str, LandmarkSet], path: str | Path, ppi: float
) -> None:
    """Inverse of load_landmarks (mm stored back as pixel coordinates)."""
    factor = ppi / MM_PER_INCH
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ppi", f"{ppi:g}"])
        writer.writerow(["id", "index", "x_px", "y_px"])
        for rid in sorted(landmarks):
            for i, (x, y) in enumerate(landmarks[rid].points):
                writer.writerow([rid, i, f"{x * factor:.9g}", f"{y * factor:.9g}"])
