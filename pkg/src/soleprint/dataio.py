"""Dataset ingestion: manifests, scans, splits, and composite export.

The manifest is a UTF-8 CSV with header ``id,image_path,sex,age,side,source``
plus an optional trailing ``ridge_counts`` column holding semicolon-separated
per-square integers.  Splits are seeded, ratio-driven, and independent of
manifest row order.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import raster
from .raster import CompositeImage, FootprintImage

FEMALE = "F"
MALE = "M"

MANIFEST_COLUMNS = ("id", "image_path", "sex", "age", "side", "source")

_SEX_ALIASES = {"f": FEMALE, "female": FEMALE, "m": MALE, "male": MALE}
_SIDE_ALIASES = {"l": "left", "left": "left", "r": "right", "right": "right"}
_SOURCES = ("walker", "bournemouth", "synthetic")


class ManifestError(Exception):
    """Base class for manifest validation failures."""


class UnreadableManifestError(ManifestError):
    """File missing, undecodable, or header malformed."""


class MissingIdError(ManifestError):
    """A data row has an empty id field."""


class DuplicateIdError(ManifestError):
    """Two rows share an id."""


class InvalidSexError(ManifestError):
    """Sex label outside {F, M}."""


class InvalidAgeError(ManifestError):
    """Age is not a non-negative integer."""


class InvalidFieldError(ManifestError):
    """Side, source, or ridge_counts field malformed."""


class ImageLoadError(Exception):
    """Base class for scan-loading failures."""


class UnsupportedFormatError(ImageLoadError):
    """Not a single-channel bitonal/grayscale TIFF or PNG."""


class ZeroAreaImageError(ImageLoadError):
    """Image has no pixels."""


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    sex: str  # FEMALE or MALE
    age: int
    side: str  # "left" or "right"
    source: str
    ridge_counts: tuple[int, ...] | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, ManifestRecord]:
        return {r.id: r for r in self.records}

    def count_by_sex(self) -> dict[str, int]:
        counts = {FEMALE: 0, MALE: 0}
        for r in self.records:
            counts[r.sex] += 1
        return counts


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int
    ratios: tuple[float, float, float]

    def membership(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            for i in ids:
                out[i] = name
        return out


def _parse_ridge_counts(text: str, row: int) -> tuple[int, ...] | None:
    text = text.strip()
    if not text:
        return None
    try:
        counts = tuple(int(part) for part in text.split(";"))
    except ValueError as exc:
        raise InvalidFieldError(f"row {row}: ridge_counts {text!r} not ';'-separated integers") from exc
    if any(c < 0 for c in counts):
        raise InvalidFieldError(f"row {row}: negative ridge count in {text!r}")
    return counts


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a manifest CSV.

    Every malformed row raises a distinct error type naming the offending
    row (1-based, counting data rows).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableManifestError(f"cannot read manifest {path}: {exc}") from exc

    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise UnreadableManifestError(f"manifest {path} is empty (no header)") from None
    header = [h.strip() for h in header]
    has_ridge = tuple(header) == MANIFEST_COLUMNS + ("ridge_counts",)
    if not has_ridge and tuple(header) != MANIFEST_COLUMNS:
        raise UnreadableManifestError(
            f"manifest {path} header {header} != {list(MANIFEST_COLUMNS)} (+ optional ridge_counts)"
        )

    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for n, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < 6:
            raise InvalidFieldError(f"row {n}: expected at least 6 fields, got {len(row)}")
        rid = row[0].strip()
        if not rid:
            raise MissingIdError(f"row {n}: empty id")
        if rid in seen:
            raise DuplicateIdError(f"row {n}: duplicate id {rid!r}")
        seen.add(rid)
        sex = _SEX_ALIASES.get(row[2].strip().lower())
        if sex is None:
            raise InvalidSexError(f"row {n} (id {rid!r}): sex {row[2]!r} not in {{F, M}}")
        try:
            age = int(row[3].strip())
        except ValueError:
            raise InvalidAgeError(f"row {n} (id {rid!r}): age {row[3]!r} is not an integer") from None
        if age < 0:
            raise InvalidAgeError(f"row {n} (id {rid!r}): age {age} is negative")
        side = _SIDE_ALIASES.get(row[4].strip().lower())
        if side is None:
            raise InvalidFieldError(f"row {n} (id {rid!r}): side {row[4]!r} not left/right")
        source = row[5].strip().lower()
        if source not in _SOURCES:
            raise InvalidFieldError(f"row {n} (id {rid!r}): source {row[5]!r} not in {_SOURCES}")
        ridge = _parse_ridge_counts(row[6], n) if has_ridge and len(row) > 6 else None
        records.append(
            ManifestRecord(
                id=rid, image_path=row[1].strip(), sex=sex, age=age,
                side=side, source=source, ridge_counts=ridge,
            )
        )
    return DatasetManifest(records=tuple(records))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest CSV (UTF-8, LF newlines, ridge_counts column included)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS + ("ridge_counts",))
        for r in manifest.records:
            ridge = ";".join(str(c) for c in r.ridge_counts) if r.ridge_counts else ""
            writer.writerow([r.id, r.image_path, r.sex, r.age, r.side, r.source, ridge])


_GRAYSCALE_MODES = {"1", "L", "I", "I;16", "F"}


def load_image(path: str | Path, expected_ppi: float) -> FootprintImage:
    """Load a bitonal or grayscale TIFF/PNG as a calibrated raster.

    Pixel values map into [0, 1] with ink at 0; dimensions are preserved and
    expected_ppi is recorded as the calibration.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in _GRAYSCALE_MODES:
                raise UnsupportedFormatError(
                    f"{path}: mode {mode!r} is not single-channel grayscale"
                )
            arr = np.asarray(im, dtype=np.float64)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a readable raster ({exc})") from exc
    except OSError as exc:
        raise ImageLoadError(f"{path}: {exc}") from exc
    if arr.size == 0:
        raise ZeroAreaImageError(f"{path}: zero-area image")
    # Mode "1" decodes to booleans, so its float form is already 0/1.
    peak = {"1": 1.0, "L": 255.0, "I": 65535.0, "I;16": 65535.0, "F": 1.0}[mode]
    arr = np.clip(arr / peak, 0.0, 1.0)
    return FootprintImage(pixels=arr, ppi=float(expected_ppi), id=path.stem)


def split_dataset(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 42,
) -> DatasetSplit:
    """Deterministic train/val/test partition of the manifest ids.

    Sizes are floor(N*r_test) and floor(N*r_val) with train taking the
    remainder; assignment shuffles the lexicographically sorted id list with
    a seeded generator, so row order in the manifest is irrelevant.  Val and
    test ratios may be zero (the 80/20 train/validation mode); the train
    ratio must stay positive.
    """
    if ratios[0] <= 0 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be positive (train) / non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    ids = sorted(manifest.ids())
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_test = int(n * ratios[2])
    n_val = int(n * ratios[1])
    n_train = n - n_val - n_test
    return DatasetSplit(
        train_ids=tuple(ids[:n_train]),
        val_ids=tuple(ids[n_train : n_train + n_val]),
        test_ids=tuple(ids[n_train + n_val :]),
        seed=seed,
        ratios=tuple(float(r) for r in ratios),
    )


def save_split(split: DatasetSplit, path: str | Path) -> None:
    payload = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "train": list(split.train_ids),
        "val": list(split.val_ids),
        "test": list(split.test_ids),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> DatasetSplit:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return DatasetSplit(
        train_ids=tuple(payload["train"]),
        val_ids=tuple(payload["val"]),
        test_ids=tuple(payload["test"]),
        seed=int(payload["seed"]),
        ratios=tuple(float(r) for r in payload["ratios"]),
    )


def mirror_image(img: FootprintImage, side: str) -> FootprintImage:
    """Reflect left prints about the vertical midline; right prints pass through."""
    if side == "right":
        return img
    if side != "left":
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return img.with_pixels(img.pixels[:, ::-1].copy())


def mirror_landmarks(points: np.ndarray, side: str, width: float) -> np.ndarray:
    """Reflect landmark x-coordinates of left prints (x -> width - 1 - x).

    width is the image width in the same unit as the coordinates, using the
    pixel-center convention (centers at 0 .. width-1).
    """
    pts = np.asarray(points, dtype=np.float64)
    if side == "right":
        return pts.copy()
    if side != "left":
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    out = pts.copy()
    out[:, 0] = (width - 1.0) - out[:, 0]
    return out


def mirror_to_right(obj, side: str, width: float | None = None):
    """Normalize a print or landmark array to right-foot orientation."""
    if isinstance(obj, FootprintImage):
        return mirror_image(obj, side)
    if width is None:
        raise ValueError("landmark mirroring needs the image width")
    return mirror_landmarks(obj, side, width)


EXPORT_CSV = "composites.csv"
EXPORT_SPLIT = "split.json"


@dataclass(frozen=True)
class ExportOptions:
    """Preprocessing applied to every record before compositing."""

    width: int = raster.COMPOSITE_WIDTH
    height: int = raster.COMPOSITE_HEIGHT
    texture: bool = True  # False -> detexture before compositing
    keep_size: bool = True  # False -> normalize away relative print size
    fill_fraction: float = 0.95
    mirror: bool = False
    ink_threshold: float = 0.5
    detexture_iterations: int = 5


def preprocess_record(
    img: FootprintImage, side: str, options: ExportOptions
) -> CompositeImage:
    """Crop, optionally detexture/normalize, and composite one scan.

    With keep_size the letterbox factor comes from the original scan
    dimensions, so cohorts whose scans share one canvas keep their relative
    print sizes on the composite.
    """
    if options.mirror:
        img = mirror_image(img, side)
    ref_w, ref_h = img.width, img.height
    if not options.texture:
        img = raster.detexture(img, iterations=options.detexture_iterations)
    box = raster.bounding_box(img, options.ink_threshold)
    cropped = raster.crop(img, box)
    if options.keep_size:
        scale = raster.fit_scale(ref_w, ref_h, options.width, options.height)
    else:
        scale = raster.normalize_scale(
            cropped.width, cropped.height, options.fill_fraction, options.width, options.height
        )
    return raster.make_composite(cropped, options.width, options.height, scale=scale)


def export_composites(
    manifest: DatasetManifest,
    split: DatasetSplit,
    output_dir: str | Path,
    images: dict[str, FootprintImage] | None = None,
    image_root: str | Path | None = None,
    ppi: float = 200.0,
    options: ExportOptions = ExportOptions(),
) -> Path:
    """Write one composite PNG per record plus the id->file,sex,age,split CSV.

    Images come either from a preloaded dict or from image_root joined with
    each record's image_path.  Preprocessing failures propagate with the
    record id attached.  Returns the CSV path; the split JSON lands next to
    it so the export directory is self-contained.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    membership = split.membership()
    rows: list[tuple[str, str, str, int, str]] = []
    for record in sorted(manifest.records, key=lambda r: r.id):
        split_name = membership.get(record.id)
        if split_name is None:
            continue
        try:
            if images is not None:
                img = images[record.id]
            else:
                root = Path(image_root) if image_root is not None else Path(".")
                img = load_image(root / record.image_path, ppi)
            composite = preprocess_record(img, record.side, options)
        except Exception as exc:
            raise type(exc)(f"record {record.id!r}: {exc}") from exc
        filename = f"{record.id}.png"
        raster.save_composite(composite, out / filename)
        rows.append((record.id, filename, record.sex, record.age, split_name))

    csv_path = out / EXPORT_CSV
    with csv_path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "file", "sex", "age", "split"])
        writer.writerows(rows)
    save_split(split, out / EXPORT_SPLIT)
    return csv_path
