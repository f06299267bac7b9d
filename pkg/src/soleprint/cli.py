"""Command-line entry point.

Every command writes its artifacts under --out, emits exactly one
machine-readable JSON summary line on stdout, and logs human-readable
progress on stderr.  Exit codes: 0 success, 1 operational error (the summary
line then carries the module error name), 2 usage error.  All randomness
flows from --seed (fallback: the SOLEPRINT_SEED environment variable, then
42), and the seed is echoed in every summary.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, discriminant, experiments, morphometrics, neuralnet, plots, raster, ridgefields, synthetic
from .experiments import NetConfig, ScenarioConfig, ScenarioDataset
from .neuralnet import TrainConfig

log = logging.getLogger("soleprint")

DEFAULT_SEED = 42


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    return int(os.environ.get("SOLEPRINT_SEED", DEFAULT_SEED))


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Dataset plumbing shared by train / evaluate / gradcam / scenarios


def _dataset_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--synthetic", type=int, metavar="N",
                        help="use the bundled synthetic benchmark with N prints")
    parser.add_argument("--manifest", help="manifest CSV")
    parser.add_argument("--images", help="directory with the scan rasters")
    parser.add_argument("--landmarks", help="landmark CSV")
    parser.add_argument("--squares", help="sampling-squares config JSON")
    parser.add_argument("--ppi", type=float, default=200.0, help="scan resolution")
    parser.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                        metavar=("TRAIN", "VAL", "TEST"))


def _load_dataset(args, seed: int) -> ScenarioDataset:
    if args.synthetic:
        data = synthetic.make_benchmark(n=args.synthetic, seed=seed, ratios=tuple(args.ratios))
        return ScenarioDataset(
            manifest=data.manifest, images=data.images, landmarks=data.landmarks,
            split=data.split, squares=data.squares,
        )
    if not args.manifest or not args.images:
        raise experiments.ExperimentError("need --synthetic N or --manifest plus --images")
    manifest = dataio.load_manifest(args.manifest)
    root = Path(args.images)
    images = {
        r.id: dataio.load_image(root / r.image_path, args.ppi) for r in manifest.records
    }
    landmarks = morphometrics.load_landmarks(args.landmarks) if args.landmarks else {}
    squares = (
        ridgefields.SquaresConfig.from_json(args.squares)
        if args.squares
        else ridgefields.SquaresConfig(pairs=synthetic.SEVEN_SQUARE_PAIRS)
    )
    split = dataio.split_dataset(manifest, ratios=tuple(args.ratios), seed=seed)
    return ScenarioDataset(
        manifest=manifest, images=images, landmarks=landmarks, split=split, squares=squares,
    )


def _scenario_arrays(dataset: ScenarioDataset, config: ScenarioConfig, net_config: NetConfig):
    return experiments.scenario_arrays(dataset, config, net_config)


def _net_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input-width", type=int, default=128)
    parser.add_argument("--input-height", type=int, default=160)
    parser.add_argument("--widths", type=int, nargs="+", default=(16, 32, 64, 128))
    parser.add_argument("--hidden", type=int, default=64)


def _train_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--task", choices=neuralnet.TASKS, default="sex")
    parser.add_argument("--lambda-weight", type=float, default=20.0)
    parser.add_argument("--epochs-head", type=int, default=10)
    parser.add_argument("--epochs-finetune", type=int, default=10)
    parser.add_argument("--lr-head", type=float, default=1e-3)
    parser.add_argument("--lr-finetune", type=float, default=1e-4)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--dropout", type=float, default=0.25)


def _train_config(args, seed: int, task: str | None = None) -> TrainConfig:
    return TrainConfig(
        task=task or args.task,
        lambda_weight=args.lambda_weight,
        epochs_head=args.epochs_head,
        epochs_finetune=args.epochs_finetune,
        lr_head=args.lr_head,
        lr_finetune=args.lr_finetune,
        batch_size=args.batch_size,
        dropout_rate=args.dropout,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(args, seed: int) -> dict:
    manifest = dataio.load_manifest(args.manifest)
    counts = manifest.count_by_sex()
    with_ridge = sum(1 for r in manifest.records if r.ridge_counts is not None)
    log.info("manifest %s: %d records", args.manifest, len(manifest))
    return {
        "records": len(manifest),
        "females": counts[dataio.FEMALE],
        "males": counts[dataio.MALE],
        "with_ridge_counts": with_ridge,
    }


def cmd_preprocess(args, seed: int) -> dict:
    out = _out_dir(args)
    manifest = dataio.load_manifest(args.manifest)
    root = Path(args.images)
    options = dataio.ExportOptions(
        width=args.width, height=args.height,
        texture=not args.detexture, keep_size=not args.normalize_size,
        mirror=args.mirror,
    )

    def process(record):
        img = dataio.load_image(root / record.image_path, args.ppi)
        return record.id, dataio.preprocess_record(img, record.side, options)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(process, manifest.records))
    else:
        results = dict(process(r) for r in manifest.records)
    rows = []
    for record in sorted(manifest.records, key=lambda r: r.id):
        composite = results[record.id]
        name = f"{record.id}.png"
        raster.save_composite(composite, out / name)
        rows.append([record.id, name, record.sex, record.age, composite.width, composite.height])
    meta = out / "composites_meta.csv"
    with meta.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "file", "sex", "age", "width", "height"])
        writer.writerows(rows)
    log.info("wrote %d composites to %s", len(rows), out)
    return {"composites": len(rows), "metadata": str(meta)}


def cmd_detexture(args, seed: int) -> dict:
    out = _out_dir(args)
    img = dataio.load_image(args.image, args.ppi)
    opened = raster.detexture(img, iterations=args.iterations)
    path = out / f"{Path(args.image).stem}_detextured.png"
    raster.save_image(opened, path)
    return {"output": str(path), "iterations": args.iterations}


def cmd_composite(args, seed: int) -> dict:
    out = _out_dir(args)
    img = dataio.load_image(args.image, args.ppi)
    box = raster.bounding_box(img)
    composite = raster.make_composite(raster.crop(img, box), args.width, args.height)
    path = out / f"{Path(args.image).stem}_composite.png"
    raster.save_composite(composite, path)
    return {"output": str(path), "bounding_box": list(box)}


def cmd_gpa(args, seed: int) -> dict:
    out = _out_dir(args)
    landmarks = morphometrics.load_landmarks(args.landmarks)
    ids = sorted(landmarks)
    ensemble = morphometrics.gpa([landmarks[i] for i in ids])
    aligned = {
        rid: morphometrics.LandmarkSet(points=ensemble.shapes[i], id=rid)
        for i, rid in enumerate(ids)
    }
    morphometrics.save_landmarks(aligned, out / "aligned.csv", ppi=morphometrics.MM_PER_INCH)
    np.savetxt(out / "mean_shape.csv", ensemble.mean_shape, delimiter=",", header="x,y", comments="")
    figure = out / "aligned_landmarks.png"
    plots.landmark_scatter_figure(ensemble, figure)
    summary = {
        "shapes": len(ids),
        "converged": ensemble.converged,
        "iterations": ensemble.iterations,
        "convergence_delta": ensemble.convergence_delta,
        "figure": str(figure),
    }
    if args.manifest:
        # thin-plate comparison of the male mean against the female mean
        by_id = dataio.load_manifest(args.manifest).by_id()
        groups = {dataio.FEMALE: [], dataio.MALE: []}
        for i, rid in enumerate(ids):
            if rid in by_id:
                groups[by_id[rid].sex].append(ensemble.shapes[i])
        if all(groups.values()):
            means = {sex: np.mean(np.stack(shapes), axis=0) for sex, shapes in groups.items()}
            warp = morphometrics.tps_fit(
                morphometrics.LandmarkSet(means[dataio.MALE], id="male_mean"),
                morphometrics.LandmarkSet(means[dataio.FEMALE], id="female_mean"),
            )
            grid, warped = morphometrics.tps_grid(warp)
            morphometrics.save_deformation_grid(grid, warped, out / "tps_grid.csv")
            plots.tps_grid_figure(grid, warped, 20, 20, out / "tps_grid.png")
            summary["bending_energy"] = warp.bending_energy
            summary["tps_grid"] = str(out / "tps_grid.csv")
    return summary


def cmd_pca(args, seed: int) -> dict:
    out = _out_dir(args)
    landmarks = morphometrics.load_landmarks(args.landmarks)
    ids = sorted(landmarks)
    ensemble = morphometrics.gpa([landmarks[i] for i in ids])
    components, fractions = morphometrics.shape_pca(ensemble)
    np.savetxt(out / "variance_fractions.csv", fractions, delimiter=",",
               header="fraction", comments="")
    np.savetxt(out / "components.csv", components, delimiter=",")
    figure = out / "variance_fractions.png"
    plots.variance_fractions_figure(fractions, figure)
    return {
        "modes": int(fractions.size),
        "first_four_variance": float(fractions[:4].sum()) if fractions.size else 0.0,
        "figure": str(figure),
    }


def cmd_distances(args, seed: int) -> dict:
    out = _out_dir(args)
    landmarks = morphometrics.load_landmarks(args.landmarks)
    manifest = dataio.load_manifest(args.manifest)
    by_id = manifest.by_id()
    ids = sorted(set(landmarks) & set(by_id))
    if not ids:
        raise experiments.ExperimentError("no ids shared between landmarks and manifest")
    rows = np.stack([morphometrics.interlandmark_distances(landmarks[i]) for i in ids])
    features = discriminant.FeatureMatrix(
        rows=rows,
        labels=tuple(by_id[i].sex for i in ids),
        feature_names=tuple(morphometrics.distance_pair_labels(landmarks[ids[0]].k)),
        ids=tuple(ids),
    )
    path = out / "distances.csv"
    discriminant.save_features(features, path)
    return {"rows": features.n, "features": features.d, "output": str(path)}


def cmd_lda(args, seed: int) -> dict:
    out = _out_dir(args)
    features = discriminant.load_features(args.features)
    model = discriminant.lda_fit(features, equal_priors=args.equal_priors)
    discriminant.save_model(model, out / "lda_model.json")
    summary = {
        "rows": features.n,
        "features": features.d,
        "accuracy": discriminant.resubstitution_accuracy(features, args.equal_priors),
        "ridge_epsilon": model.ridge_epsilon,
    }
    if args.jackknife:
        summary["jackknife"] = discriminant.jackknife_accuracy(features, args.equal_priors)
    return summary


def cmd_squares(args, seed: int) -> dict:
    out = _out_dir(args)
    img = dataio.load_image(args.image, args.ppi)
    landmarks = morphometrics.load_landmarks(args.landmarks)
    lms = landmarks[Path(args.image).stem] if Path(args.image).stem in landmarks else (
        next(iter(landmarks.values()))
    )
    config = ridgefields.SquaresConfig.from_json(args.config)
    patches = ridgefields.extract_squares(img, lms, config)
    rows = [
        [f"{pair[0]}-{pair[1]}", ridgefields.black_fraction(patch)]
        for pair, patch in zip(config.pairs, patches)
    ]
    path = out / "square_features.csv"
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair", "black_fraction"])
        writer.writerows(rows)
    tile = ridgefields.texture_tile(img, patches)
    raster.save_image(tile, out / "texture_tile.png")
    px_per_mm = img.ppi / morphometrics.MM_PER_INCH
    centers = ridgefields.place_squares(lms, config.pairs, config.side_mm)
    figure = out / "squares.png"
    plots.squares_figure(
        img.pixels, [(cx * px_per_mm, cy * px_per_mm) for cx, cy in centers],
        ridgefields.patch_side_px(config.side_mm, img.ppi), figure,
    )
    return {"squares": len(patches), "features": str(path), "figure": str(figure)}


def cmd_train(args, seed: int) -> dict:
    out = _out_dir(args)
    dataset = _load_dataset(args, seed)
    scenario = ScenarioConfig(1, args.task, args.shape, args.texture, args.size, "cnn")
    net_config = NetConfig(args.input_width, args.input_height, tuple(args.widths), args.hidden)
    config = _train_config(args, seed)
    arrays = _scenario_arrays(dataset, scenario, net_config)
    net = neuralnet.ConvNet(
        input_hw=(net_config.input_h, net_config.input_w), widths=net_config.widths,
        hidden=net_config.hidden, task=args.task, dropout_rate=config.dropout_rate, seed=seed,
    )
    log.info("training task=%s on %d prints (%d parameters)",
             args.task, arrays["train"].n, net.parameter_count())
    result = neuralnet.train(net, arrays["train"], arrays["val"], config)
    checkpoint = out / "model.ckpt"
    neuralnet.save_checkpoint(net, checkpoint)
    neuralnet.save_history(result.history, out / "history.csv")
    figure = out / "training_curves.png"
    if result.history:
        plots.training_curves_figure(result.history, figure)
    test_stats = neuralnet.evaluate(net, arrays["test"], config.lambda_weight)
    return {
        "checkpoint": str(checkpoint),
        "parameters": net.parameter_count(),
        "best_epoch": result.best_epoch,
        "test_accuracy": test_stats["accuracy"],
        "test_mae": test_stats["mae"],
    }


def cmd_evaluate(args, seed: int) -> dict:
    out = _out_dir(args)
    net = neuralnet.load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args, seed)
    scenario = ScenarioConfig(1, net.task, args.shape, args.texture, args.size, "cnn")
    net_config = NetConfig(net.input_hw[1], net.input_hw[0], net.widths, net.hidden)
    arrays = _scenario_arrays(dataset, scenario, net_config)
    data = arrays[args.split]
    stats = neuralnet.evaluate(net, data, args.lambda_weight)
    outputs = neuralnet.forward(net, data.x)
    path = out / "predictions.csv"
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "sex_label", "sex_prob", "age_label", "age_estimate"])
        for i, rid in enumerate(data.ids):
            writer.writerow([
                rid,
                "F" if data.sex is not None and data.sex[i] == 1.0 else "M",
                f"{outputs['sex'][i]:.6f}" if "sex" in outputs else "-",
                int(data.age[i]) if data.age is not None else "-",
                f"{outputs['age'][i]:.2f}" if "age" in outputs else "-",
            ])
    return {"split": args.split, "n": data.n, "predictions": str(path), **stats}


def cmd_gradcam(args, seed: int) -> dict:
    out = _out_dir(args)
    net = neuralnet.load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args, seed)
    scenario = ScenarioConfig(1, net.task, args.shape, args.texture, args.size, "cnn")
    net_config = NetConfig(net.input_hw[1], net.input_hw[0], net.widths, net.hidden)
    arrays = _scenario_arrays(dataset, scenario, net_config)
    data = arrays[args.split]
    if args.id:
        picks = [data.ids.index(args.id)]
    else:
        picks = list(range(min(args.count, data.n)))
    written = []
    for i in picks:
        heat = neuralnet.gradcam(net, data.x[i], target=args.target)
        path = out / f"gradcam_{data.ids[i]}.png"
        plots.heatmap_overlay(data.x[i], heat, path)
        written.append(str(path))
    return {"target": args.target, "heatmaps": written}


def cmd_scenarios(args, seed: int) -> dict:
    out = _out_dir(args)
    config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    spec = config.get("dataset", {})
    if "synthetic" in spec:
        synth = spec["synthetic"]
        data = synthetic.make_benchmark(
            n=int(synth.get("n", 400)),
            seed=seed,
            ratios=tuple(synth.get("ratios", (0.8, 0.1, 0.1))),
            textured=bool(synth.get("textured", True)),
        )
        dataset = ScenarioDataset(
            manifest=data.manifest, images=data.images, landmarks=data.landmarks,
            split=data.split, squares=data.squares,
        )
    else:
        namespace = argparse.Namespace(
            synthetic=None,
            manifest=spec.get("manifest"),
            images=spec.get("images"),
            landmarks=spec.get("landmarks"),
            squares=spec.get("squares"),
            ppi=float(spec.get("ppi", 200.0)),
            ratios=tuple(spec.get("ratios", (0.8, 0.1, 0.1))),
        )
        dataset = _load_dataset(namespace, seed)

    wanted = config.get("scenarios", "all")
    all_scenarios = experiments.standard_scenarios()
    if wanted != "all":
        wanted_ids = {int(w) for w in wanted}
        all_scenarios = [s for s in all_scenarios if s.scenario_id in wanted_ids]
    train_overrides = dict(config.get("train", {}))
    net_config = NetConfig.from_dict(config.get("net", {}))

    reports = []
    failures = []
    for scenario in all_scenarios:
        train_config = TrainConfig(task=scenario.task, seed=seed, **train_overrides)
        log.info("scenario %d (%s, method=%s)", scenario.scenario_id, scenario.task, scenario.method)
        try:
            reports.append(
                experiments.run_scenario(dataset, scenario, train_config, net_config)
            )
        except Exception as exc:
            failures.append({"scenario": scenario.scenario_id, "error": type(exc).__name__,
                             "detail": str(exc)})
            log.error("scenario %d failed: %s", scenario.scenario_id, exc)
    summary: dict = {"scenarios": len(reports), "failures": failures}
    if reports:
        text, payload = experiments.report_table(reports)
        payload["seed"] = seed
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        figure = out / "report.png"
        plots.scenario_accuracy_figure(reports, figure)
        sys.stderr.write(text)
        summary.update({
            "report_json": str(out / "report.json"),
            "report_text": str(out / "report.txt"),
            "figure": str(figure),
        })
    if failures:
        raise experiments.ExperimentError(
            f"{len(failures)} scenario(s) failed: "
            + ", ".join(f"{f['scenario']}:{f['error']}" for f in failures)
        )
    return summary


def cmd_export(args, seed: int) -> dict:
    out = _out_dir(args)
    dataset = _load_dataset(args, seed)
    options = dataio.ExportOptions(texture=not args.detexture, keep_size=not args.normalize_size)
    csv_path = dataio.export_composites(
        dataset.manifest, dataset.split, out, images=dataset.images, options=options,
    )
    return {
        "export_csv": str(csv_path),
        "split_json": str(out / dataio.EXPORT_SPLIT),
        "records": len(dataset.manifest),
    }


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soleprint",
        description="Footprint sexing pipeline: preprocessing, morphometrics, baselines, training, and reports.",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="random seed (fallback: SOLEPRINT_SEED, then 42)")
    parser.add_argument("-v", "--verbose", action="store_true", help="chatty stderr log")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and report label counts")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="crop, composite, and write per-record PNGs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True, help="scan directory")
    p.add_argument("--out", required=True)
    p.add_argument("--ppi", type=float, default=200.0)
    p.add_argument("--width", type=int, default=raster.COMPOSITE_WIDTH)
    p.add_argument("--height", type=int, default=raster.COMPOSITE_HEIGHT)
    p.add_argument("--detexture", action="store_true", help="remove ridge texture first")
    p.add_argument("--normalize-size", action="store_true", help="erase relative print size")
    p.add_argument("--mirror", action="store_true", help="mirror left prints to right")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("detexture", help="morphological opening of one scan")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ppi", type=float, default=200.0)
    p.add_argument("--iterations", type=int, default=5)
    p.set_defaults(func=cmd_detexture)

    p = sub.add_parser("composite", help="three-kernel composite of one scan")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ppi", type=float, default=200.0)
    p.add_argument("--width", type=int, default=raster.COMPOSITE_WIDTH)
    p.add_argument("--height", type=int, default=raster.COMPOSITE_HEIGHT)
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("gpa", help="generalised Procrustes alignment of a landmark file")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--manifest", help="with sex labels: adds the class-mean thin-plate warp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gpa)

    p = sub.add_parser("pca", help="principal components of aligned shapes")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("distances", help="inter-landmark distance features")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--manifest", required=True, help="manifest for sex labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("lda", help="linear discriminant on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jackknife", action="store_true")
    p.add_argument("--equal-priors", action="store_true")
    p.set_defaults(func=cmd_lda)

    p = sub.add_parser("squares", help="sampling squares: extraction, fractions, tile")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--config", required=True, help="squares config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--ppi", type=float, default=200.0)
    p.set_defaults(func=cmd_squares)

    for name, fn, help_text in (
        ("train", cmd_train, "train the desk-scale model"),
        ("evaluate", cmd_evaluate, "evaluate a checkpoint on a split"),
        ("gradcam", cmd_gradcam, "gradient-weighted activation heatmaps"),
    ):
        p = sub.add_parser(name, help=help_text)
        _dataset_args(p)
        p.add_argument("--out", required=True)
        p.add_argument("--shape", dest="shape", action="store_true", default=True)
        p.add_argument("--no-shape", dest="shape", action="store_false")
        p.add_argument("--texture", dest="texture", action="store_true", default=True)
        p.add_argument("--no-texture", dest="texture", action="store_false")
        p.add_argument("--size", dest="size", action="store_true", default=True)
        p.add_argument("--no-size", dest="size", action="store_false")
        if name == "train":
            _net_args(p)
            _train_args(p)
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--lambda-weight", type=float, default=20.0)
        if name == "gradcam":
            p.add_argument("--target", choices=("sex", "age"), default="sex")
            p.add_argument("--id", help="single record id")
            p.add_argument("--count", type=int, default=4)
        p.set_defaults(func=fn)

    p = sub.add_parser("scenarios", help="run a scenario suite and render the report")
    p.add_argument("--config", required=True, help="suite config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("export", help="write composites + CSV + split for the full-scale trainer")
    _dataset_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--detexture", action="store_true")
    p.add_argument("--normalize-size", action="store_true")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    seed = _resolve_seed(args.seed)
    try:
        summary = args.func(args, seed)
    except Exception as exc:  # operational error -> exit 1 with the error name
        _emit({"command": args.command, "seed": seed,
               "error": type(exc).__name__, "detail": str(exc)})
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    _emit({"command": args.command, "seed": seed, **summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
