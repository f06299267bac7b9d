"""CLI: `footprint-fullscale train|evaluate` over a composite export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .model import BACKBONES, FullScaleConfig
from .runner import evaluate_fullscale, train_fullscale

log = logging.getLogger("fullscale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="footprint-fullscale",
        description="Fine-tune pretrained ResNet backbones on footprint composite exports.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="two-stage fine-tune on an export directory")
    p.add_argument("--export", required=True, help="directory with composites.csv + split.json")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config (same train block as the pipeline)")
    p.add_argument("--backbone", choices=BACKBONES)
    p.add_argument("--task", choices=("sex", "age", "both"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs-head", type=int)
    p.add_argument("--epochs-finetune", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--no-pretrained", action="store_true")
    p.set_defaults(command_fn="train")

    p = sub.add_parser("evaluate", help="report + Grad-CAM heatmaps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--export", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gradcam-count", type=int, default=None)
    p.set_defaults(command_fn="evaluate")
    return parser


def _config_from_args(args) -> FullScaleConfig:
    payload = {}
    if args.config:
        payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = FullScaleConfig.from_json(payload)
    overrides = {}
    for attr, key in (("backbone", "backbone"), ("task", "task"), ("seed", "seed"),
                      ("epochs_head", "epochs_head"), ("epochs_finetune", "epochs_finetune"),
                      ("batch_size", "batch_size")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if args.image_size:
        overrides["image_size"] = tuple(args.image_size)
    if args.no_pretrained:
        overrides["pretrained"] = False
    if overrides:
        merged = {**config.__dict__, **overrides}
        config = FullScaleConfig(**merged)
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command_fn == "train":
            payload = train_fullscale(args.export, _config_from_args(args), args.out)
        else:
            payload = evaluate_fullscale(args.checkpoint, args.export, args.out,
                                         args.gradcam_count)
    except Exception as exc:
        print(json.dumps({"command": args.command, "error": type(exc).__name__,
                          "detail": str(exc)}, sort_keys=True))
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    row = payload["rows"][0]
    print(json.dumps({"command": args.command, "seed": payload["seed"],
                      "n_test": row["n_test"], "accuracy": row["accuracy"],
                      "mae_years": row["mae_years"]}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
