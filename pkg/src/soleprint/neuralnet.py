"""Desk-scale convolutional network with manual forward/backward passes.

The model is a stack of conv blocks (3x3 convolution -> batch norm -> ReLU
-> 2x2 max pool), global average pooling, and a two-linear-layer head with
batch norm, ReLU and dropout in between.  Tasks: a sigmoid "probability of
female" output, an unconstrained age estimate, or both heads jointly with
the age loss plus lambda-weighted sex loss.

Everything is plain numpy with float64 math so analytic gradients can be
validated against central finite differences.  Training is the two-stage
schedule: head only with the backbone frozen (including its normalization
statistics), then a full fine-tune, both under Adam.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .raster import resample_array

PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"SPNET001"

TASKS = ("sex", "age", "both")


class NeuralNetError(Exception):
    """Base class for network failures."""


class ShapeMismatchError(NeuralNetError):
    """Input tensor shape does not match the network."""


class EmptyTrainSetError(NeuralNetError):
    """Training requested on an empty split."""


class NonFiniteError(NeuralNetError):
    """NaN/Inf appeared in parameters or activations."""


# ---------------------------------------------------------------------------
# Losses


def bce_loss(y, y_hat):
    """Binary cross-entropy with the estimate clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(y_hat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def l1_loss(y_r, y_hat_r):
    """Absolute error |y - y_hat|."""
    out = np.abs(np.asarray(y_r, dtype=np.float64) - np.asarray(y_hat_r, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def combined_loss(loss_r, loss_c, lambda_weight: float):
    """Weighted sum loss_r + lambda * loss_c; gradients split additively."""
    out = np.asarray(loss_r, dtype=np.float64) + lambda_weight * np.asarray(loss_c, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Layers


class Conv2D:
    """3x3 same-padding convolution via im2col."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, ksize: int = 3):
        scale = np.sqrt(2.0 / (cin * ksize * ksize))
        self.ksize = ksize
        self.params = {
            "weight": rng.normal(0.0, scale, size=(cout, cin, ksize, ksize)),
            "bias": np.zeros(cout),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        k = self.ksize
        pad = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # (n, c, h, w, k, k)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
        wmat = self.params["weight"].reshape(-1, c * k * k)
        out = cols @ wmat.T + self.params["bias"]
        self._cache = (cols, (n, c, h, w))
        return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, (n, c, h, w) = self._cache
        k = self.ksize
        pad = k // 2
        dmat = dout.transpose(0, 2, 3, 1).reshape(n * h * w, -1)
        self.grads["weight"] += (dmat.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += dmat.sum(axis=0)
        dcols = (dmat @ self.params["weight"].reshape(-1, c * k * k)).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + h, kj : kj + w] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        return dxp[:, :, pad : pad + h, pad : pad + w]


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        axes = (0, 2, 3)
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            unbiased = var * m / max(m - 1, 1)
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            self._cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[:, None, None]) * inv_std[:, None, None]
            self._cache = ("eval", xhat, inv_std)
        return self.params["gamma"][:, None, None] * xhat + self.params["beta"][:, None, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        mode, xhat, inv_std = self._cache
        axes = (0, 2, 3)
        self.grads["gamma"] += (dout * xhat).sum(axis=axes)
        self.grads["beta"] += dout.sum(axis=axes)
        g = (self.params["gamma"] * inv_std)[:, None, None]
        if mode == "eval":
            return dout * g
        return g * (
            dout
            - dout.mean(axis=axes, keepdims=True)
            - xhat * (dout * xhat).mean(axis=axes, keepdims=True)
        )


class BatchNorm1d:
    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(features), "beta": np.zeros(features)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            m = x.shape[0]
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * m / max(m - 1, 1)
            self._cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
            self._cache = ("eval", xhat, inv_std)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        mode, xhat, inv_std = self._cache
        self.grads["gamma"] += (dout * xhat).sum(axis=0)
        self.grads["beta"] += dout.sum(axis=0)
        g = self.params["gamma"] * inv_std
        if mode == "eval":
            return dout * g
        return g * (dout - dout.mean(axis=0) - xhat * (dout * xhat).mean(axis=0))


class ReLU:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self._mask = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask


class MaxPool2x2:
    """2x2 stride-2 max pool; gradient goes to the first maximum in scan
    order; trailing odd rows/columns are dropped."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        windows = (
            x[:, :, : 2 * h2, : 2 * w2]
            .reshape(n, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2, w2, 4)
        )
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, (n, c, h, w))
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        idx, (n, c, h, w) = self._cache
        h2, w2 = h // 2, w // 2
        dwin = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : 2 * h2, : 2 * w2] = (
            dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return dx


class GlobalAvgPool:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self._hw = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._hw = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        h, w = self._hw
        return np.broadcast_to(dout[:, :, None, None], dout.shape + (h, w)).copy() / (h * w)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        scale = np.sqrt(2.0 / n_in)
        self.params = {"weight": rng.normal(0.0, scale, size=(n_out, n_in)), "bias": np.zeros(n_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.grads["weight"] += dout.T @ self._x
        self.grads["bias"] += dout.sum(axis=0)
        return dout @ self.params["weight"]


class Dropout:
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = np.random.default_rng(0)
        self.params = {}
        self.grads = {}
        self._mask = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout if self._mask is None else dout * self._mask


# ---------------------------------------------------------------------------
# Network


@dataclass
class TrainConfig:
    task: str = "sex"
    lambda_weight: float = 20.0
    epochs_head: int = 10
    epochs_finetune: int = 10
    lr_head: float = 1e-3
    lr_finetune: float = 1e-4
    batch_size: int = 32
    dropout_rate: float = 0.25
    seed: int = 42
    deterministic: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be >= 0")
        if self.epochs_head < 0 or self.epochs_finetune < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class ConvNet:
    """Conv blocks -> global average pool -> two-layer head.

    Composites arrive with ink = 0 on background = 1; the first (fixed)
    operation re-poles them to ink = 1 so the active signal is the print and
    the zero padding of the convolutions matches empty background.  Without
    this the padding manufactures high-contrast border edges that dominate
    activation maps.
    """

    def __init__(
        self,
        input_hw: tuple[int, int] = (160, 128),
        in_channels: int = 3,
        widths: tuple[int, ...] = (16, 32, 64, 128),
        hidden: int = 64,
        task: str = "sex",
        dropout_rate: float = 0.25,
        seed: int = 0,
    ):
        if task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        self.input_hw = tuple(input_hw)
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.hidden = hidden
        self.task = task
        self.dropout_rate = dropout_rate
        self.seed = seed
        rng = np.random.default_rng(seed)

        self.backbone: list = []
        cin = in_channels
        for cout in widths:
            self.backbone.extend([Conv2D(cin, cout, rng), BatchNorm2d(cout), ReLU(), MaxPool2x2()])
            cin = cout
        self.gap = GlobalAvgPool()
        n_out = 2 if task == "both" else 1
        self.n_out = n_out
        self.head: list = [
            Linear(cin, hidden, rng),
            BatchNorm1d(hidden),
            ReLU(),
            Dropout(dropout_rate),
            Linear(hidden, n_out, rng),
        ]
        self._last_conv_act: np.ndarray | None = None
        self._last_conv_grad: np.ndarray | None = None

    # -- parameter bookkeeping -------------------------------------------

    def named_layers(self):
        for i, layer in enumerate(self.backbone):
            yield f"backbone.{i}", layer
        yield "gap", self.gap
        for i, layer in enumerate(self.head):
            yield f"head.{i}", layer

    def named_params(self, head_only: bool = False):
        for prefix, layer in self.named_layers():
            if head_only and not prefix.startswith("head"):
                continue
            for key in layer.params:
                yield f"{prefix}.{key}", layer, key

    def parameter_count(self) -> int:
        return sum(layer.params[key].size for _, layer, key in self.named_params())

    def zero_grads(self) -> None:
        for _, layer, key in self.named_params():
            layer.grads[key].fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for prefix, layer in self.named_layers():
            for key, value in layer.params.items():
                state[f"{prefix}.{key}"] = value.copy()
            if isinstance(layer, (BatchNorm2d, BatchNorm1d)):
                state[f"{prefix}.running_mean"] = layer.running_mean.copy()
                state[f"{prefix}.running_var"] = layer.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, layer in self.named_layers():
            for key in layer.params:
                layer.params[key][...] = state[f"{prefix}.{key}"]
            if isinstance(layer, (BatchNorm2d, BatchNorm1d)):
                layer.running_mean[...] = state[f"{prefix}.running_mean"]
                layer.running_var[...] = state[f"{prefix}.running_var"]

    def seed_dropout(self, seed: int) -> None:
        for layer in self.head:
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng(seed)

    # -- passes ------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != self.input_hw:
            raise ShapeMismatchError(
                f"expected (N, {self.in_channels}, {self.input_hw[0]}, {self.input_hw[1]}), got {x.shape}"
            )

    def backbone_forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._check_input(x)
        out = 1.0 - x  # re-pole: ink becomes the active signal
        relu_out = None
        for layer in self.backbone:
            out = layer.forward(out, train)
            if isinstance(layer, ReLU):
                relu_out = out
        self._last_conv_act = relu_out
        return self.gap.forward(out, train)

    def head_forward(self, features: np.ndarray, train: bool) -> np.ndarray:
        out = features
        for layer in self.head:
            out = layer.forward(out, train)
        return out

    def raw_forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.head_forward(self.backbone_forward(x, train), train)

    def outputs(self, raw: np.ndarray) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.task in ("sex", "both"):
            out["sex"] = sigmoid(raw[:, 0])
            out["sex_logit"] = raw[:, 0]
        if self.task in ("age", "both"):
            out["age"] = raw[:, -1]
        return out

    def head_backward(self, draw: np.ndarray) -> np.ndarray:
        grad = draw
        for layer in reversed(self.head):
            grad = layer.backward(grad)
        return grad

    def backbone_backward(self, dfeatures: np.ndarray) -> np.ndarray:
        grad = self.gap.backward(dfeatures)
        captured = False
        for layer in reversed(self.backbone):
            grad = layer.backward(grad)
            if not captured and isinstance(layer, MaxPool2x2):
                # Gradient now sits at the last block's ReLU output.
                self._last_conv_grad = grad
                captured = True
        return -grad  # chain through the input re-poling

    def backward(self, draw: np.ndarray) -> np.ndarray:
        return self.backbone_backward(self.head_backward(draw))


def forward(net: ConvNet, batch: np.ndarray, train: bool = False) -> dict[str, np.ndarray]:
    """Run a batch through the net; returns sex probabilities and/or ages."""
    return net.outputs(net.raw_forward(batch, train))


# ---------------------------------------------------------------------------
# Optimizer


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    if not state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    state["m"] = beta1 * state["m"] + (1 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1 - beta2) * grad * grad
    m_hat = state["m"] / (1 - beta1 ** state["t"])
    v_hat = state["v"] / (1 - beta2 ** state["t"])
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamOptimizer:
    def __init__(self, net: ConvNet, lr: float, head_only: bool = False,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.head_only = head_only
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self) -> None:
        for name, layer, key in self.net.named_params(head_only=self.head_only):
            adam_step(
                layer.params[key], layer.grads[key], self.state.setdefault(name, {}),
                self.lr, self.beta1, self.beta2, self.eps,
            )


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class ArrayDataset:
    """In-memory tensors for one split."""

    x: np.ndarray  # (N, 3, H, W)
    sex: np.ndarray | None = None  # 1.0 = female, 0.0 = male
    age: np.ndarray | None = None  # years
    ids: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    best_state: dict[str, np.ndarray] | None = field(default=None, repr=False)


def _task_loss_and_grad(net: ConvNet, raw: np.ndarray, sex: np.ndarray | None,
                        age: np.ndarray | None, lambda_weight: float):
    """Batch-mean loss terms and the gradient w.r.t. the raw head output."""
    n = raw.shape[0]
    draw = np.zeros_like(raw)
    loss_c = 0.0
    loss_r = 0.0
    if net.task in ("sex", "both"):
        if sex is None:
            raise NeuralNetError("task includes sex but sex labels are missing")
        probs = sigmoid(raw[:, 0])
        loss_c = float(np.mean(bce_loss(sex, probs)))
        scale = lambda_weight if net.task == "both" else 1.0
        draw[:, 0] += scale * (probs - sex) / n
    if net.task in ("age", "both"):
        if age is None:
            raise NeuralNetError("task includes age but age labels are missing")
        residual = raw[:, -1] - age
        loss_r = float(np.mean(np.abs(residual)))
        draw[:, -1] += np.sign(residual) / n
    if net.task == "sex":
        total = loss_c
    elif net.task == "age":
        total = loss_r
    else:
        total = combined_loss(loss_r, loss_c, lambda_weight)
    return total, loss_r, loss_c, draw


def _metrics(net: ConvNet, raw: np.ndarray, sex: np.ndarray | None, age: np.ndarray | None):
    accuracy = float("nan")
    mae = float("nan")
    if net.task in ("sex", "both") and sex is not None:
        probs = sigmoid(raw[:, 0])
        predicted = (probs >= 0.5).astype(np.float64)  # ties go to female
        accuracy = float(np.mean(predicted == sex))
    if net.task in ("age", "both") and age is not None:
        mae = float(np.mean(np.abs(raw[:, -1] - age)))
    return accuracy, mae


def evaluate(net: ConvNet, data: ArrayDataset, lambda_weight: float = 20.0,
             batch_size: int = 64) -> dict[str, float]:
    """Eval-mode metrics over a dataset."""
    raws = []
    for start in range(0, data.n, batch_size):
        raws.append(net.raw_forward(data.x[start : start + batch_size], train=False))
    raw = np.concatenate(raws) if raws else np.zeros((0, net.n_out))
    total, loss_r, loss_c, _ = _task_loss_and_grad(net, raw, data.sex, data.age, lambda_weight)
    accuracy, mae = _metrics(net, raw, data.sex, data.age)
    return {
        "loss_r": loss_r, "loss_c": loss_c, "combined": total,
        "accuracy": accuracy, "mae": mae,
    }


def _assert_finite(net: ConvNet) -> None:
    for name, layer, key in net.named_params():
        if not np.all(np.isfinite(layer.params[key])):
            raise NonFiniteError(f"non-finite values in parameter {name}")


def _epoch_row(epoch: int, stage: str, split: str, stats: dict[str, float]) -> dict:
    return {
        "epoch": epoch, "stage": stage, "split": split,
        "loss_r": stats["loss_r"], "loss_c": stats["loss_c"],
        "combined": stats["combined"], "accuracy": stats["accuracy"], "mae": stats["mae"],
    }


def train(
    net: ConvNet,
    train_data: ArrayDataset,
    val_data: ArrayDataset | None,
    config: TrainConfig,
) -> TrainResult:
    """Two-stage schedule: head-only epochs, then full fine-tune epochs.

    Stage 1 keeps every backbone parameter and normalization statistic
    frozen (the backbone runs as a fixed eval-mode feature extractor, so its
    features are computed once).  Stage 2 re-opens the whole network under a
    fresh Adam state.  The snapshot with the best validation combined loss
    is restored into the net before returning.
    """
    if config.task != net.task:
        raise NeuralNetError(f"config task {config.task!r} != net task {net.task!r}")
    if train_data.n == 0:
        raise EmptyTrainSetError("empty training split")
    if net.task in ("sex", "both") and train_data.sex is None:
        raise NeuralNetError("sex labels required for this task")
    if net.task in ("age", "both") and train_data.age is None:
        raise NeuralNetError("age labels required for this task")

    seed = config.seed if config.deterministic else None
    shuffle_rng = np.random.default_rng(seed)
    net.seed_dropout(seed + 1 if seed is not None else None)

    history: list[dict] = []
    best_loss = np.inf
    best_epoch = -1
    best_state = net.state_dict() if (config.epochs_head + config.epochs_finetune) > 0 else None

    def run_epoch(epoch: int, stage: str, optimizer: AdamOptimizer,
                  features: np.ndarray | None, val_features: np.ndarray | None) -> None:
        nonlocal best_loss, best_epoch, best_state
        order = shuffle_rng.permutation(train_data.n)
        sums = {"loss_r": 0.0, "loss_c": 0.0, "combined": 0.0}
        raw_all = np.zeros((train_data.n, net.n_out))
        for start in range(0, train_data.n, config.batch_size):
            idx = order[start : start + config.batch_size]
            sex = train_data.sex[idx] if train_data.sex is not None else None
            age = train_data.age[idx] if train_data.age is not None else None
            if features is not None:
                raw = net.head_forward(features[idx], train=True)
            else:
                raw = net.head_forward(net.backbone_forward(train_data.x[idx], train=True), train=True)
            total, loss_r, loss_c, draw = _task_loss_and_grad(net, raw, sex, age, config.lambda_weight)
            net.zero_grads()
            grad = net.head_backward(draw)
            if features is None:
                net.backbone_backward(grad)
            optimizer.step()
            _assert_finite(net)
            weight = len(idx) / train_data.n
            sums["loss_r"] += loss_r * weight
            sums["loss_c"] += loss_c * weight
            sums["combined"] += total * weight
            raw_all[idx] = raw
        accuracy, mae = _metrics(net, raw_all, train_data.sex, train_data.age)
        history.append(_epoch_row(epoch, stage, "train", {**sums, "accuracy": accuracy, "mae": mae}))

        if val_data is not None and val_data.n > 0:
            if val_features is not None:
                raw_val = net.head_forward(val_features, train=False)
                total, loss_r, loss_c, _ = _task_loss_and_grad(
                    net, raw_val, val_data.sex, val_data.age, config.lambda_weight
                )
                acc_v, mae_v = _metrics(net, raw_val, val_data.sex, val_data.age)
                val_stats = {"loss_r": loss_r, "loss_c": loss_c, "combined": total,
                             "accuracy": acc_v, "mae": mae_v}
            else:
                val_stats = evaluate(net, val_data, config.lambda_weight, config.batch_size)
            history.append(_epoch_row(epoch, stage, "val", val_stats))
            if val_stats["combined"] < best_loss:
                best_loss = val_stats["combined"]
                best_epoch = epoch
                best_state = net.state_dict()

    epoch = 0
    if config.epochs_head > 0:
        # Frozen backbone: eval-mode features computed once.
        features = _batched_features(net, train_data.x, config.batch_size)
        val_features = (
            _batched_features(net, val_data.x, config.batch_size)
            if val_data is not None and val_data.n > 0 else None
        )
        optimizer = AdamOptimizer(net, config.lr_head, head_only=True,
                                  beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        for _ in range(config.epochs_head):
            epoch += 1
            run_epoch(epoch, "head", optimizer, features, val_features)

    if config.epochs_finetune > 0:
        optimizer = AdamOptimizer(net, config.lr_finetune, head_only=False,
                                  beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        for _ in range(config.epochs_finetune):
            epoch += 1
            run_epoch(epoch, "finetune", optimizer, None, None)

    if best_state is not None and best_epoch >= 0:
        net.load_state_dict(best_state)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_loss=float(best_loss), best_state=best_state)


def _batched_features(net: ConvNet, x: np.ndarray, batch_size: int) -> np.ndarray:
    chunks = [
        net.backbone_forward(x[start : start + batch_size], train=False)
        for start in range(0, x.shape[0], batch_size)
    ]
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    net: ConvNet,
    batch: np.ndarray,
    sex: np.ndarray | None,
    age: np.ndarray | None,
    lambda_weight: float = 20.0,
    epsilon: float = 1e-4,
    max_params: int = 200,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients with central finite differences.

    Runs in training mode with dropout disabled.  Perturbations that push an
    age residual across the L1 kink are excluded and reported rather than
    failed.  Returns max relative error plus counts.
    """
    for layer in net.head:
        if isinstance(layer, Dropout) and layer.rate != 0.0:
            raise NeuralNetError("grad_check requires dropout_rate == 0")

    def loss_only() -> tuple[float, np.ndarray | None]:
        raw = net.raw_forward(batch, train=True)
        total, _, _, _ = _task_loss_and_grad(net, raw, sex, age, lambda_weight)
        residual = raw[:, -1] - age if net.task in ("age", "both") else None
        return total, residual

    raw = net.raw_forward(batch, train=True)
    _, _, _, draw = _task_loss_and_grad(net, raw, sex, age, lambda_weight)
    net.zero_grads()
    net.backward(draw)

    entries = [(name, layer, key) for name, layer, key in net.named_params()]
    flat: list[tuple[str, object, str, int]] = []
    for name, layer, key in entries:
        for i in range(layer.params[key].size):
            flat.append((name, layer, key, i))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat), size=min(max_params, len(flat)), replace=False)

    max_rel = 0.0
    checked = 0
    skipped = 0
    for pick in picks:
        name, layer, key, i = flat[pick]
        param = layer.params[key].ravel()
        original = param[i]
        param[i] = original + epsilon
        loss_plus, res_plus = loss_only()
        param[i] = original - epsilon
        loss_minus, res_minus = loss_only()
        param[i] = original
        if res_plus is not None and np.any(np.sign(res_plus) != np.sign(res_minus)):
            skipped += 1
            continue
        numeric = (loss_plus - loss_minus) / (2 * epsilon)
        analytic = layer.grads[key].ravel()[i]
        denom = max(abs(numeric), abs(analytic), 1e-8)
        rel = abs(numeric - analytic) / denom
        if abs(numeric) < 1e-10 and abs(analytic) < 1e-10:
            rel = 0.0
        max_rel = max(max_rel, rel)
        checked += 1
    return {"max_rel_error": max_rel, "checked": checked, "skipped": skipped}


# ---------------------------------------------------------------------------
# Grad-CAM


def gradcam(net: ConvNet, image: np.ndarray, target: str = "sex") -> np.ndarray:
    """Gradient-weighted activation map for one image, in [0, 1].

    Channel weights are the spatial means of d(target score)/d(final conv
    feature maps); the rectified weighted sum is upsampled to the input size
    with the BILINEAR kernel and min-max normalized (an all-zero map stays
    all-zero).  The sex score is the pre-sigmoid logit; the age score is the
    age output itself.
    """
    if target not in ("sex", "age"):
        raise ValueError("target must be 'sex' or 'age'")
    if target == "sex" and net.task == "age":
        raise NeuralNetError("net has no sex head")
    if target == "age" and net.task == "sex":
        raise NeuralNetError("net has no age head")
    x = image[None] if image.ndim == 3 else image
    if x.shape[0] != 1:
        raise ShapeMismatchError("gradcam expects a single image")

    raw = net.raw_forward(x, train=False)
    draw = np.zeros_like(raw)
    draw[0, 0 if target == "sex" else -1] = 1.0
    net.zero_grads()
    net.backward(draw)
    activations = net._last_conv_act[0]
    gradients = net._last_conv_grad[0]

    weights = gradients.mean(axis=(1, 2))
    cam = np.maximum(0.0, np.tensordot(weights, activations, axes=1))
    peak = cam.max()
    if peak <= 0.0:
        return np.zeros(net.input_hw)
    cam = cam / peak  # affine rescale; final min-max is unaffected
    cam = resample_array(cam, net.input_hw[1], net.input_hw[0], kernel="BILINEAR")
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    return cam


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(net: ConvNet, path: str | Path) -> None:
    """Versioned binary dump: JSON header + shape-tagged little-endian
    float32 buffers."""
    state = net.state_dict()
    names = sorted(state)
    header = {
        "arch": {
            "input_hw": list(net.input_hw),
            "in_channels": net.in_channels,
            "widths": list(net.widths),
            "hidden": net.hidden,
            "task": net.task,
            "dropout_rate": net.dropout_rate,
            "seed": net.seed,
        },
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "dtype": "<f4",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> ConvNet:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise NeuralNetError(f"{path}: not a checkpoint (magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
        arch = header["arch"]
        net = ConvNet(
            input_hw=tuple(arch["input_hw"]),
            in_channels=arch["in_channels"],
            widths=tuple(arch["widths"]),
            hidden=arch["hidden"],
            task=arch["task"],
            dropout_rate=arch["dropout_rate"],
            seed=arch["seed"],
        )
        state = {}
        for tensor in header["tensors"]:
            shape = tuple(tensor["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            state[tensor["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)
    net.load_state_dict(state)
    return net


def save_history(history: list[dict], path: str | Path) -> None:
    """Training history CSV: epoch, split, loss_r, loss_c, combined,
    accuracy, mae."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "split", "loss_r", "loss_c", "combined", "accuracy", "mae", "stage"])
        for row in history:
            writer.writerow([
                row["epoch"], row["split"],
                f"{row['loss_r']:.9g}", f"{row['loss_c']:.9g}", f"{row['combined']:.9g}",
                f"{row['accuracy']:.9g}", f"{row['mae']:.9g}", row["stage"],
            ])
