"""Readers for the preprocessing pipeline's export directory.

An export is self-contained: ``composites.csv`` maps id -> file,sex,age,split,
``split.json`` freezes the id partition, and each referenced PNG is an 8-bit
RGB composite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

EXPORT_CSV = "composites.csv"
EXPORT_SPLIT = "split.json"

# ImageNet statistics, required by the pretrained backbones.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExportError(Exception):
    """Missing or malformed export directory."""


@dataclass(frozen=True)
class ExportRecord:
    id: str
    file: str
    sex: float  # 1.0 female, 0.0 male
    age: float
    split: str


def read_export(export_dir: str | Path) -> tuple[list[ExportRecord], dict]:
    export_dir = Path(export_dir)
    csv_path = export_dir / EXPORT_CSV
    split_path = export_dir / EXPORT_SPLIT
    if not csv_path.exists():
        raise ExportError(f"{csv_path} not found; run the pipeline's export first")
    if not split_path.exists():
        raise ExportError(f"{split_path} not found; the export is incomplete")
    records = []
    with csv_path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"id", "file", "sex", "age", "split"}
        if set(reader.fieldnames or ()) != expected:
            raise ExportError(f"{csv_path}: header {reader.fieldnames} != {sorted(expected)}")
        for row in reader:
            records.append(
                ExportRecord(
                    id=row["id"],
                    file=row["file"],
                    sex=1.0 if row["sex"].strip().upper() == "F" else 0.0,
                    age=float(row["age"]),
                    split=row["split"],
                )
            )
    split = json.loads(split_path.read_text(encoding="utf-8"))
    return records, split


class CompositeFolder(Dataset):
    """Composite PNGs for one split, normalized for the pretrained backbone."""

    def __init__(
        self,
        export_dir: str | Path,
        records: list[ExportRecord],
        split: str,
        image_size: tuple[int, int] | None = None,  # (width, height)
    ):
        self.root = Path(export_dir)
        self.records = [r for r in records if r.split == split]
        self.image_size = image_size
        mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
        self._mean, self._std = mean, std

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        record = self.records[index]
        with Image.open(self.root / record.file) as im:
            im = im.convert("RGB")
            if self.image_size is not None:
                im = im.resize(self.image_size, Image.BILINEAR)
            array = np.asarray(im, dtype=np.float32) / 255.0
        tensor = torch.from_numpy(array).permute(2, 0, 1)
        tensor = (tensor - self._mean) / self._std
        labels = torch.tensor([record.sex, record.age], dtype=torch.float32)
        return tensor, labels, record.id
