"""ResNet backbones with the custom two-linear-layer head."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
from torchvision import models

log = logging.getLogger("fullscale")

BACKBONES = ("resnet34", "resnet50", "resnet101")
TASKS = ("sex", "age", "both")


@dataclass
class FullScaleConfig:
    """Mirrors the pipeline's training config where the fields are shared."""

    backbone: str = "resnet101"
    task: str = "both"
    lambda_weight: float = 20.0
    epochs_head: int = 10
    epochs_finetune: int = 10
    lr_head: float = 1e-3
    lr_finetune: float = 1e-4
    batch_size: int = 32
    dropout_rate: float = 0.25
    hidden: int = 64
    seed: int = 42
    pretrained: bool = True
    device: str = "auto"
    image_size: tuple[int, int] | None = None  # (width, height); None = native 512x640
    scenario_id: int = 1
    shape: bool = True
    texture: bool = True
    size: bool = True
    gradcam_count: int = 4

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")

    @staticmethod
    def from_json(payload: dict) -> "FullScaleConfig":
        train = dict(payload.get("train", {}))
        scenario = dict(payload.get("scenario", {}))
        kwargs = {}
        for key in ("lambda_weight", "epochs_head", "epochs_finetune", "lr_head",
                    "lr_finetune", "batch_size", "dropout_rate", "seed"):
            if key in train:
                kwargs[key] = train[key]
        for key in ("backbone", "task", "pretrained", "device", "hidden", "gradcam_count"):
            if key in payload:
                kwargs[key] = payload[key]
        if "image_size" in payload and payload["image_size"] is not None:
            kwargs["image_size"] = tuple(payload["image_size"])
        for key in ("scenario_id", "shape", "texture", "size"):
            if key in scenario:
                kwargs[key] = scenario[key]
        return FullScaleConfig(**kwargs)

    def resolve_device(self) -> torch.device:
        if self.device != "auto":
            return torch.device(self.device)
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")


class FootprintResNet(nn.Module):
    """Pretrained backbone with the final fully-connected layer replaced by a
    head of two linear layers with ReLU in between, plus batch normalization
    and dropout.  Output: sex logit and/or raw age estimate."""

    def __init__(self, config: FullScaleConfig):
        super().__init__()
        self.task = config.task
        factory = getattr(models, config.backbone)
        weights = None
        self.pretrained_loaded = False
        if config.pretrained:
            try:
                weights = getattr(models, f"{_weights_enum(config.backbone)}").IMAGENET1K_V1
                backbone = factory(weights=weights)
                self.pretrained_loaded = True
            except Exception as exc:  # offline environments: fall back, loudly
                log.warning("could not fetch pretrained weights (%s); using random init", exc)
                backbone = factory(weights=None)
        else:
            backbone = factory(weights=None)
        features = backbone.fc.in_features
        backbone.fc = nn.Identity()
        self.backbone = backbone
        n_out = 2 if config.task == "both" else 1
        self.head = nn.Sequential(
            nn.Linear(features, config.hidden),
            nn.BatchNorm1d(config.hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout_rate),
            nn.Linear(config.hidden, n_out),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def set_backbone_frozen(self, frozen: bool) -> None:
        for parameter in self.backbone.parameters():
            parameter.requires_grad_(not frozen)

    def split_outputs(self, raw: torch.Tensor) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        if self.task in ("sex", "both"):
            out["sex_logit"] = raw[:, 0]
        if self.task in ("age", "both"):
            out["age"] = raw[:, -1]
        return out


def _weights_enum(backbone: str) -> str:
    return {"resnet34": "ResNet34_Weights", "resnet50": "ResNet50_Weights",
            "resnet101": "ResNet101_Weights"}[backbone]


def save_checkpoint(model: FootprintResNet, config: FullScaleConfig, path: str | Path) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "config": {
                "backbone": config.backbone,
                "task": config.task,
                "hidden": config.hidden,
                "dropout_rate": config.dropout_rate,
                "image_size": list(config.image_size) if config.image_size else None,
                "lambda_weight": config.lambda_weight,
                "scenario_id": config.scenario_id,
                "shape": config.shape,
                "texture": config.texture,
                "size": config.size,
                "seed": config.seed,
                "pretrained_loaded": model.pretrained_loaded,
            },
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[FootprintResNet, FullScaleConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    meta = payload["config"]
    config = FullScaleConfig(
        backbone=meta["backbone"],
        task=meta["task"],
        hidden=meta["hidden"],
        dropout_rate=meta["dropout_rate"],
        image_size=tuple(meta["image_size"]) if meta.get("image_size") else None,
        lambda_weight=meta.get("lambda_weight", 20.0),
        scenario_id=meta.get("scenario_id", 1),
        shape=meta.get("shape", True),
        texture=meta.get("texture", True),
        size=meta.get("size", True),
        seed=meta.get("seed", 42),
        pretrained=False,  # weights come from the checkpoint
    )
    model = FootprintResNet(config)
    model.load_state_dict(payload["state_dict"])
    model.pretrained_loaded = bool(meta.get("pretrained_loaded", False))
    return model, config
