"""Scenario harness: shape/texture/size toggles, metrics, and reports.

A scenario fixes a task (sex, age, or both), an input construction (which of
shape, texture, and size survive preprocessing) and a method (the
convolutional model, or a linear discriminant on landmark coordinates or
inter-landmark distances).  The standard grid is seventeen scenarios: five
input combinations for each of the three tasks, plus the two discriminant
baselines.  Reports render as a fixed-layout text table and as deterministic
JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, discriminant, morphometrics, neuralnet, raster, ridgefields
from .dataio import FEMALE, DatasetManifest, DatasetSplit, ExportOptions
from .morphometrics import LandmarkSet
from .neuralnet import ArrayDataset, ConvNet, TrainConfig
from .raster import CompositeImage, FootprintImage
from .ridgefields import SquaresConfig

METHODS = ("cnn", "lda_coords", "lda_distances")

TASK_LABELS = {"sex": "Sex estimation", "both": "Sex & age estimation", "age": "Age estimation"}

# The five input combinations, in grid order: (shape, texture, size).
FLAG_COMBOS = (
    (True, True, True),
    (True, False, True),
    (True, True, False),
    (True, False, False),
    (False, True, False),
)


class ExperimentError(Exception):
    """Base class for harness failures."""


class ScenarioConfigError(ExperimentError):
    """Flag combination or method violates the scenario contract."""


class LengthMismatchError(ExperimentError):
    """Prediction and label lists differ in length."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: int
    task: str
    shape: bool
    texture: bool
    size: bool
    method: str = "cnn"

    def __post_init__(self) -> None:
        if not 1 <= self.scenario_id <= 17:
            raise ScenarioConfigError(f"scenario_id must be 1..17, got {self.scenario_id}")
        if self.task not in neuralnet.TASKS:
            raise ScenarioConfigError(f"unknown task {self.task!r}")
        if self.method not in METHODS:
            raise ScenarioConfigError(f"unknown method {self.method!r}")
        if self.size and not self.shape:
            raise ScenarioConfigError("size requires shape: size information only exists with shape")
        if self.method != "cnn" and self.task != "sex":
            raise ScenarioConfigError("discriminant baselines are sex-only")


@dataclass(frozen=True)
class ScenarioReport:
    scenario_id: int
    task: str
    shape: bool
    texture: bool
    size: bool
    method: str
    n_test: int
    seed: int
    accuracy: float | None = None
    jackknife: float | None = None
    mae_years: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "task": self.task,
            "shape": self.shape,
            "texture": self.texture,
            "size": self.size,
            "method": self.method,
            "n_test": self.n_test,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "jackknife": self.jackknife,
            "mae_years": self.mae_years,
            "config": self.config,
        }


def standard_scenarios() -> list[ScenarioConfig]:
    """The seventeen-scenario grid (15 CNN runs plus 2 LDA baselines)."""
    out: list[ScenarioConfig] = []
    sid = 1
    for task in ("sex", "both", "age"):
        for shape, texture, size in FLAG_COMBOS:
            out.append(ScenarioConfig(sid, task, shape, texture, size, "cnn"))
            sid += 1
    out.append(ScenarioConfig(16, "sex", True, False, False, "lda_coords"))
    out.append(ScenarioConfig(17, "sex", True, False, True, "lda_distances"))
    return out


@dataclass(frozen=True)
class NetConfig:
    """Desk-scale network geometry (the 512x640 composite is downscaled)."""

    input_w: int = 128
    input_h: int = 160
    widths: tuple[int, ...] = (16, 32, 64, 128)
    hidden: int = 64

    @staticmethod
    def from_dict(payload: dict) -> "NetConfig":
        base = NetConfig()
        return NetConfig(
            input_w=int(payload.get("input_w", base.input_w)),
            input_h=int(payload.get("input_h", base.input_h)),
            widths=tuple(payload.get("widths", base.widths)),
            hidden=int(payload.get("hidden", base.hidden)),
        )


@dataclass(frozen=True)
class ScenarioDataset:
    """Everything a scenario needs: records, rasters, landmarks, split."""

    manifest: DatasetManifest
    images: dict[str, FootprintImage]
    landmarks: dict[str, LandmarkSet]
    split: DatasetSplit
    squares: SquaresConfig
    fill_fraction: float = 0.95
    ink_threshold: float = 0.5


def build_scenario_input(
    image: FootprintImage,
    landmarks: LandmarkSet | None,
    config: ScenarioConfig,
    width: int = raster.COMPOSITE_WIDTH,
    height: int = raster.COMPOSITE_HEIGHT,
    squares: SquaresConfig | None = None,
    fill_fraction: float = 0.95,
    ink_threshold: float = 0.5,
) -> CompositeImage:
    """Construct the network input a scenario prescribes.

    Shape scenarios crop and composite the print (detexturing first when
    texture is withheld; a per-print normalizing scale when size is
    withheld, a scan-constant scale when it is kept).  Shape-free scenarios
    composite the tiled sampling squares instead.
    """
    if config.shape:
        options = ExportOptions(
            width=width,
            height=height,
            texture=config.texture,
            keep_size=config.size,
            fill_fraction=fill_fraction,
            ink_threshold=ink_threshold,
        )
        return dataio.preprocess_record(image, "right", options)
    if landmarks is None or squares is None:
        raise ExperimentError("texture-only scenarios need landmarks and a squares config")
    patches = ridgefields.extract_squares(image, landmarks, squares)
    grid = ridgefields.tile_grid(patches, ridgefields.default_grid_shape(len(patches)))
    tile = FootprintImage(pixels=grid, ppi=image.ppi, id=image.id)
    return raster.make_composite(tile, width, height)


def accuracy(predictions, labels) -> float:
    """Fraction correct; numeric predictions threshold at 0.5 (ties female)."""
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise LengthMismatchError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not predictions:
        raise LengthMismatchError("empty prediction list")

    def as_label(value) -> str:
        if isinstance(value, str):
            return value
        return FEMALE if float(value) >= 0.5 else dataio.MALE

    return sum(as_label(p) == as_label(t) for p, t in zip(predictions, labels)) / len(predictions)


def mae(predictions, ages) -> float:
    """Mean absolute error in years."""
    predictions = np.asarray(list(predictions), dtype=np.float64)
    ages = np.asarray(list(ages), dtype=np.float64)
    if predictions.shape != ages.shape:
        raise LengthMismatchError(f"{predictions.shape} predictions vs {ages.shape} ages")
    if predictions.size == 0:
        raise LengthMismatchError("empty prediction list")
    return float(np.mean(np.abs(predictions - ages)))


def scenario_arrays(
    dataset: ScenarioDataset,
    config: ScenarioConfig,
    net_config: NetConfig,
) -> dict[str, ArrayDataset]:
    """Scenario inputs for each split, at the desk-scale input size."""
    by_id = dataset.manifest.by_id()
    arrays: dict[str, ArrayDataset] = {}
    for name, ids in (
        ("train", dataset.split.train_ids),
        ("val", dataset.split.val_ids),
        ("test", dataset.split.test_ids),
    ):
        x = np.zeros((len(ids), 3, net_config.input_h, net_config.input_w))
        sex = np.zeros(len(ids))
        age = np.zeros(len(ids))
        for row, rid in enumerate(ids):
            record = by_id[rid]
            composite = build_scenario_input(
                dataset.images[rid],
                dataset.landmarks.get(rid),
                config,
                width=net_config.input_w,
                height=net_config.input_h,
                squares=dataset.squares,
                fill_fraction=dataset.fill_fraction,
                ink_threshold=dataset.ink_threshold,
            )
            x[row] = composite.channels
            sex[row] = 1.0 if record.sex == FEMALE else 0.0
            age[row] = float(record.age)
        arrays[name] = ArrayDataset(x=x, sex=sex, age=age, ids=tuple(ids))
    return arrays


def _audit_split(split: DatasetSplit) -> None:
    overlap = set(split.test_ids) & (set(split.train_ids) | set(split.val_ids))
    if overlap:
        raise ExperimentError(f"test ids leak into train/val: {sorted(overlap)[:5]}")


def _lda_features(dataset: ScenarioDataset, config: ScenarioConfig) -> discriminant.FeatureMatrix:
    ids = sorted(dataset.landmarks)
    by_id = dataset.manifest.by_id()
    labels = tuple(by_id[rid].sex for rid in ids)
    if config.method == "lda_coords":
        ensemble = morphometrics.gpa([dataset.landmarks[rid] for rid in ids])
        rows = ensemble.shapes.reshape(len(ids), -1)
        names = tuple(
            f"{axis}{k}" for k in range(rows.shape[1] // 2) for axis in ("x", "y")
        )
    else:
        rows = np.stack(
            [morphometrics.interlandmark_distances(dataset.landmarks[rid]) for rid in ids]
        )
        names = tuple(morphometrics.distance_pair_labels(dataset.landmarks[ids[0]].k))
    return discriminant.FeatureMatrix(rows=rows, labels=labels, feature_names=names, ids=tuple(ids))


def run_scenario(
    dataset: ScenarioDataset,
    config: ScenarioConfig,
    train_config: TrainConfig | None = None,
    net_config: NetConfig = NetConfig(),
) -> ScenarioReport:
    """Run one scenario end to end and report its test metrics.

    CNN scenarios train on the train split, keep the best-validation
    snapshot, and report on the held-out test split.  The discriminant
    baselines follow the conventional morphometric protocol instead:
    resubstitution accuracy on the full feature matrix with the jackknifed
    (leave-one-out) figure alongside.
    """
    _audit_split(dataset.split)
    seed = train_config.seed if train_config is not None else 42
    if config.method in ("lda_coords", "lda_distances"):
        features = _lda_features(dataset, config)
        try:
            resub = discriminant.resubstitution_accuracy(features)
            jack = discriminant.jackknife_accuracy(features)
        except discriminant.DiscriminantError as exc:
            raise type(exc)(f"scenario {config.scenario_id}: {exc}") from exc
        return ScenarioReport(
            scenario_id=config.scenario_id,
            task=config.task,
            shape=config.shape,
            texture=config.texture,
            size=config.size,
            method=config.method,
            n_test=features.n,
            seed=seed,
            accuracy=resub,
            jackknife=jack,
            config={"features": features.d},
        )

    if train_config is None:
        train_config = TrainConfig(task=config.task)
    if train_config.task != config.task:
        raise ScenarioConfigError(
            f"scenario {config.scenario_id}: train config task {train_config.task!r} "
            f"!= scenario task {config.task!r}"
        )
    arrays = scenario_arrays(dataset, config, net_config)
    if arrays["train"].n == 0:
        raise neuralnet.EmptyTrainSetError(f"scenario {config.scenario_id}: empty train split")
    if len(set(arrays["train"].sex.tolist())) < 2 and config.task in ("sex", "both"):
        raise discriminant.SingleClassError(
            f"scenario {config.scenario_id}: train split has a single class"
        )
    net = ConvNet(
        input_hw=(net_config.input_h, net_config.input_w),
        widths=net_config.widths,
        hidden=net_config.hidden,
        task=config.task,
        dropout_rate=train_config.dropout_rate,
        seed=train_config.seed,
    )
    neuralnet.train(net, arrays["train"], arrays["val"], train_config)
    test = arrays["test"]
    stats = neuralnet.evaluate(net, test, train_config.lambda_weight, train_config.batch_size)
    report_accuracy = stats["accuracy"] if config.task in ("sex", "both") else None
    report_mae = stats["mae"] if config.task in ("age", "both") else None
    return ScenarioReport(
        scenario_id=config.scenario_id,
        task=config.task,
        shape=config.shape,
        texture=config.texture,
        size=config.size,
        method=config.method,
        n_test=test.n,
        seed=seed,
        accuracy=report_accuracy,
        mae_years=report_mae,
        config={
            "net": {
                "input_w": net_config.input_w,
                "input_h": net_config.input_h,
                "widths": list(net_config.widths),
                "hidden": net_config.hidden,
            },
            "train": {
                "task": train_config.task,
                "lambda_weight": train_config.lambda_weight,
                "epochs_head": train_config.epochs_head,
                "epochs_finetune": train_config.epochs_finetune,
                "lr_head": train_config.lr_head,
                "lr_finetune": train_config.lr_finetune,
                "batch_size": train_config.batch_size,
                "dropout_rate": train_config.dropout_rate,
                "seed": train_config.seed,
            },
        },
    )


def run_scenarios(
    dataset: ScenarioDataset,
    configs: list[ScenarioConfig],
    train_config: TrainConfig | None = None,
    net_config: NetConfig = NetConfig(),
) -> list[ScenarioReport]:
    reports = []
    for config in configs:
        tc = train_config
        if tc is not None and config.method == "cnn" and tc.task != config.task:
            tc = TrainConfig(**{**tc.__dict__, "task": config.task})
        reports.append(run_scenario(dataset, config, tc, net_config))
    return reports


def _format_accuracy(report: ScenarioReport) -> str:
    if report.accuracy is None:
        return "-"
    text = f"{100.0 * report.accuracy:.2f}%"
    if report.jackknife is not None:
        text += f" ({100.0 * report.jackknife:.2f}%)"
    return text


def _format_mae(report: ScenarioReport) -> str:
    return "-" if report.mae_years is None else f"{report.mae_years:.2f}"


def report_table(reports: list[ScenarioReport]) -> tuple[str, dict]:
    """Fixed-layout text table plus a JSON-ready dict, sorted by scenario."""
    if not reports:
        raise ExperimentError("no reports to tabulate")
    rows = sorted(reports, key=lambda r: r.scenario_id)
    header = ("Scenario", "Task", "Shape", "Texture", "Size", "Accuracy (Sex)", "MAE (Age)")
    cells = []
    previous_task = None
    for report in rows:
        task_label = TASK_LABELS[report.task]
        shown = task_label if task_label != previous_task else ""
        previous_task = task_label
        cells.append(
            (
                str(report.scenario_id),
                shown,
                "Yes" if report.shape else "No",
                "Yes" if report.texture else "No",
                "Yes" if report.size else "No",
                _format_accuracy(report),
                _format_mae(report),
            )
        )
    widths = [max(len(header[i]), *(len(c[i]) for c in cells)) for i in range(len(header))]
    lines = [
        "  ".join(header[i].ljust(widths[i]) for i in range(len(header))).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(header))),
    ]
    for row in cells:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(header))).rstrip())
    payload = {"rows": [r.to_dict() for r in rows]}
    return "\n".join(lines) + "\n", payload


def save_reports(reports: list[ScenarioReport], path: str | Path) -> None:
    _, payload = report_table(reports)
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_reports(path: str | Path) -> list[ScenarioReport]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    reports = []
    for row in payload["rows"]:
        reports.append(
            ScenarioReport(
                scenario_id=int(row["scenario_id"]),
                task=row["task"],
                shape=bool(row["shape"]),
                texture=bool(row["texture"]),
                size=bool(row["size"]),
                method=row["method"],
                n_test=int(row["n_test"]),
                seed=int(row["seed"]),
                accuracy=row.get("accuracy"),
                jackknife=row.get("jackknife"),
                mae_years=row.get("mae_years"),
                config=row.get("config", {}),
            )
        )
    return reports
