"""Two-stage fine-tuning and evaluation on a composite export."""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.utils.data import DataLoader

from .data import CompositeFolder, read_export
from .model import FootprintResNet, FullScaleConfig, save_checkpoint

log = logging.getLogger("fullscale")


def _loss_terms(model: FootprintResNet, raw: torch.Tensor, labels: torch.Tensor,
                lambda_weight: float):
    """(total, loss_r, loss_c): L1 age loss plus lambda-weighted sex BCE."""
    outputs = model.split_outputs(raw)
    loss_c = raw.new_zeros(())
    loss_r = raw.new_zeros(())
    if "sex_logit" in outputs:
        loss_c = nn.functional.binary_cross_entropy_with_logits(
            outputs["sex_logit"], labels[:, 0])
    if "age" in outputs:
        loss_r = nn.functional.l1_loss(outputs["age"], labels[:, 1])
    if model.task == "sex":
        total = loss_c
    elif model.task == "age":
        total = loss_r
    else:
        total = loss_r + lambda_weight * loss_c
    return total, float(loss_r.detach()), float(loss_c.detach())


@torch.no_grad()
def _evaluate_split(model: FootprintResNet, loader: DataLoader, device: torch.device,
                    lambda_weight: float) -> dict:
    model.eval()
    n = 0
    correct = 0
    abs_error = 0.0
    total_loss = 0.0
    per_item: list[dict] = []
    for batch, labels, ids in loader:
        batch, labels = batch.to(device), labels.to(device)
        raw = model(batch)
        total, _, _ = _loss_terms(model, raw, labels, lambda_weight)
        total_loss += float(total) * len(ids)
        outputs = model.split_outputs(raw)
        probs = torch.sigmoid(outputs["sex_logit"]) if "sex_logit" in outputs else None
        ages = outputs.get("age")
        for i, rid in enumerate(ids):
            row = {"id": rid, "sex_label": float(labels[i, 0]), "age_label": float(labels[i, 1])}
            item_loss = 0.0
            if probs is not None:
                p = float(probs[i])
                row["sex_prob"] = p
                correct += (p >= 0.5) == (labels[i, 0] >= 0.5)
                clamped = min(max(p, 1e-7), 1.0 - 1e-7)
                entropy = -(float(labels[i, 0]) * np.log(clamped)
                            + (1.0 - float(labels[i, 0])) * np.log(1.0 - clamped))
                item_loss += (lambda_weight if model.task == "both" else 1.0) * entropy
            if ages is not None:
                row["age_estimate"] = float(ages[i])
                residual = abs(float(ages[i]) - float(labels[i, 1]))
                abs_error += residual
                item_loss += residual
            row["loss"] = item_loss
            per_item.append(row)
        n += len(ids)
    return {
        "n": n,
        "loss": total_loss / max(n, 1),
        "accuracy": (int(correct) / n) if model.task in ("sex", "both") and n else None,
        "mae": (abs_error / n) if model.task in ("age", "both") and n else None,
        "per_item": per_item,
    }


def _report_payload(config: FullScaleConfig, stats: dict, extra_config: dict) -> dict:
    """One row in the pipeline's scenario report schema."""
    row = {
        "scenario_id": config.scenario_id,
        "task": config.task,
        "shape": config.shape,
        "texture": config.texture,
        "size": config.size,
        "method": "cnn",
        "n_test": stats["n"],
        "seed": config.seed,
        "accuracy": stats["accuracy"] if config.task in ("sex", "both") else None,
        "jackknife": None,
        "mae_years": stats["mae"] if config.task in ("age", "both") else None,
        "config": extra_config,
    }
    return {"rows": [row], "seed": config.seed}


def _loaders(export_dir, config: FullScaleConfig):
    records, _ = read_export(export_dir)
    loaders = {}
    for split, shuffle in (("train", True), ("val", False), ("test", False)):
        dataset = CompositeFolder(export_dir, records, split, config.image_size)
        generator = torch.Generator().manual_seed(config.seed)
        loaders[split] = DataLoader(
            dataset, batch_size=config.batch_size, shuffle=shuffle and len(dataset) > 0,
            num_workers=0, generator=generator if shuffle else None,
        )
    return loaders


def train_fullscale(export_dir: str | Path, config: FullScaleConfig,
                    output_dir: str | Path) -> dict:
    """Stage-1 head-only training, stage-2 full fine-tune, best-val snapshot.

    Writes checkpoint.pt, metrics.json (the pipeline's report schema), and
    history.csv under output_dir; returns the metrics payload.
    """
    torch.manual_seed(config.seed)
    device = config.resolve_device()
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    loaders = _loaders(export_dir, config)
    if len(loaders["train"].dataset) == 0:
        raise ValueError("export contains no training rows")

    model = FootprintResNet(config).to(device)
    history: list[dict] = []
    best = {"loss": float("inf"), "state": copy.deepcopy(model.state_dict()), "epoch": -1}

    def run_stage(stage: str, epochs: int, lr: float, head_only: bool, start_epoch: int) -> int:
        epoch = start_epoch
        if epochs <= 0:
            return epoch
        model.set_backbone_frozen(head_only)
        parameters = model.head.parameters() if head_only else model.parameters()
        optimizer = torch.optim.Adam(parameters, lr=lr)
        for _ in range(epochs):
            epoch += 1
            model.train()
            if head_only:
                model.backbone.eval()  # frozen normalization statistics
            running = 0.0
            seen = 0
            for batch, labels, _ in loaders["train"]:
                batch, labels = batch.to(device), labels.to(device)
                optimizer.zero_grad(set_to_none=True)
                if head_only:
                    with torch.no_grad():
                        features = model.backbone(batch)
                    raw = model.head(features)
                else:
                    raw = model(batch)
                total, _, _ = _loss_terms(model, raw, labels, config.lambda_weight)
                total.backward()
                optimizer.step()
                running += float(total.detach()) * batch.shape[0]
                seen += batch.shape[0]
            row = {"epoch": epoch, "stage": stage, "train_loss": running / seen}
            if len(loaders["val"].dataset) > 0:
                stats = _evaluate_split(model, loaders["val"], device, config.lambda_weight)
                row.update(val_loss=stats["loss"], val_accuracy=stats["accuracy"],
                           val_mae=stats["mae"])
                if stats["loss"] < best["loss"]:
                    best.update(loss=stats["loss"], state=copy.deepcopy(model.state_dict()),
                                epoch=epoch)
            history.append(row)
            log.info("epoch %d [%s]: %s", epoch, stage,
                     ", ".join(f"{k}={v}" for k, v in row.items() if k != "epoch"))
        return epoch

    epoch = run_stage("head", config.epochs_head, config.lr_head, True, 0)
    run_stage("finetune", config.epochs_finetune, config.lr_finetune, False, epoch)

    if best["epoch"] >= 0:
        model.load_state_dict(best["state"])
    model.set_backbone_frozen(False)

    stats = _evaluate_split(model, loaders["test"], device, config.lambda_weight)
    payload = _report_payload(config, stats, {
        "backbone": config.backbone,
        "pretrained": model.pretrained_loaded,
        "image_size": list(config.image_size) if config.image_size else [512, 640],
        "best_epoch": best["epoch"],
        "train": {
            "lambda_weight": config.lambda_weight,
            "epochs_head": config.epochs_head,
            "epochs_finetune": config.epochs_finetune,
            "lr_head": config.lr_head,
            "lr_finetune": config.lr_finetune,
            "batch_size": config.batch_size,
            "dropout_rate": config.dropout_rate,
            "seed": config.seed,
        },
    })
    save_checkpoint(model, config, output_dir / "checkpoint.pt")
    (output_dir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_history(history, output_dir / "history.csv")
    return payload


def _write_history(history: list[dict], path: Path) -> None:
    import csv

    keys = ["epoch", "stage", "train_loss", "val_loss", "val_accuracy", "val_mae"]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys)
        for row in history:
            writer.writerow([row.get(k, "") for k in keys])


# ---------------------------------------------------------------------------
# Evaluation + Grad-CAM


def _heat_colormap(heat: np.ndarray) -> np.ndarray:
    """Minimal blue->green->red ramp for [0,1] heat values."""
    r = np.clip(1.5 - np.abs(4.0 * heat - 3.0), 0, 1)
    g = np.clip(1.5 - np.abs(4.0 * heat - 2.0), 0, 1)
    b = np.clip(1.5 - np.abs(4.0 * heat - 1.0), 0, 1)
    return np.stack([r, g, b], axis=-1)


def gradcam_overlay(model: FootprintResNet, tensor: torch.Tensor, target: str,
                    path: Path) -> None:
    """Grad-CAM at the last residual stage, blended 50/50 over the input."""
    model.eval()
    captured: dict[str, torch.Tensor] = {}

    def forward_hook(_module, _inputs, output):
        captured["act"] = output
        output.register_hook(lambda grad: captured.__setitem__("grad", grad))

    handle = model.backbone.layer4.register_forward_hook(forward_hook)
    try:
        x = tensor[None].requires_grad_(False)
        raw = model(x)
        outputs = model.split_outputs(raw)
        score = outputs["sex_logit"][0] if target == "sex" else outputs["age"][0]
        model.zero_grad(set_to_none=True)
        score.backward()
    finally:
        handle.remove()
    act = captured["act"][0].detach()
    grad = captured["grad"][0].detach()
    weights = grad.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * act).sum(dim=0))
    cam = cam.cpu().numpy()
    if cam.max() > 0:
        cam = cam / cam.max()
    heat = np.asarray(Image.fromarray((cam * 255).astype(np.uint8)).resize(
        (tensor.shape[2], tensor.shape[1]), Image.BILINEAR), dtype=np.float32) / 255.0
    base = tensor.cpu().numpy()
    base = base * np.array([0.229, 0.224, 0.225])[:, None, None] + \
        np.array([0.485, 0.456, 0.406])[:, None, None]  # un-normalize
    gray = np.clip(base.mean(axis=0), 0, 1)
    blended = 0.5 * np.repeat(gray[..., None], 3, axis=2) + 0.5 * _heat_colormap(heat)
    Image.fromarray((np.clip(blended, 0, 1) * 255).round().astype(np.uint8)).save(path)


def evaluate_fullscale(checkpoint_path: str | Path, export_dir: str | Path,
                       output_dir: str | Path, gradcam_count: int | None = None) -> dict:
    """Report (pipeline schema) + per-item CSV + heatmaps for the k
    lowest-loss test items."""
    from .model import load_checkpoint

    model, config = load_checkpoint(checkpoint_path)
    device = config.resolve_device()
    model = model.to(device)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    loaders = _loaders(export_dir, config)
    stats = _evaluate_split(model, loaders["test"], device, config.lambda_weight)

    import csv

    with (output_dir / "predictions.csv").open("w", encoding="utf-8", newline="\n") as fh:
        keys = ["id", "sex_label", "sex_prob", "age_label", "age_estimate", "loss"]
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(keys)
        for row in stats["per_item"]:
            writer.writerow([row.get(k, "") for k in keys])

    count = config.gradcam_count if gradcam_count is None else gradcam_count
    count = min(count, stats["n"])
    written = []
    if count > 0:
        ranked = sorted(stats["per_item"], key=lambda r: r["loss"])[:count]
        wanted = {row["id"] for row in ranked}
        target = "sex" if model.task in ("sex", "both") else "age"
        dataset = loaders["test"].dataset
        for i in range(len(dataset)):
            tensor, _, rid = dataset[i]
            if rid in wanted:
                path = output_dir / f"gradcam_{rid}.png"
                gradcam_overlay(model, tensor.to(device), target, path)
                written.append(str(path))
    payload = _report_payload(config, stats, {
        "backbone": config.backbone,
        "pretrained": model.pretrained_loaded,
        "checkpoint": str(checkpoint_path),
        "heatmaps": written,
    })
    (output_dir / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return payload
