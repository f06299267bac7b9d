"""Two-class linear discriminant analysis with jackknifed accuracy.

Fits the classical pooled-covariance discriminant w = S^-1 (mu_f - mu_m)
and reports both resubstitution and leave-one-out (jackknifed) accuracy.
Near-singular pooled covariances (e.g. 153 distance features on a couple of
hundred prints) fall back to a small ridge whose epsilon is recorded on the
model for audit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FEMALE, MALE

_COND_LIMIT = 1e12


class DiscriminantError(Exception):
    """Base class for discriminant failures."""


class SingleClassError(DiscriminantError):
    """Fewer than two classes (or fewer than two members in one) present."""


class EmptyMatrixError(DiscriminantError):
    """No rows or no features."""


class DimensionMismatchError(DiscriminantError):
    """Prediction input has the wrong feature dimension."""


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray  # (N, d)
    labels: tuple[str, ...]  # FEMALE / MALE per row
    feature_names: tuple[str, ...] = ()
    ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.size == 0:
            raise EmptyMatrixError("feature matrix must be a non-empty 2-D array")
        if not np.all(np.isfinite(rows)):
            raise ValueError("feature matrix contains non-finite values")
        if len(self.labels) != rows.shape[0]:
            raise ValueError("one label per row required")
        bad = sorted({l for l in self.labels if l not in (FEMALE, MALE)})
        if bad:
            raise ValueError(f"labels must be F/M, got {bad}")
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def subset(self, keep: np.ndarray) -> "FeatureMatrix":
        labels = tuple(l for l, k in zip(self.labels, keep) if k)
        ids = tuple(i for i, k in zip(self.ids, keep) if k) if self.ids else ()
        return FeatureMatrix(self.rows[keep], labels, self.feature_names, ids)


@dataclass(frozen=True)
class LdaModel:
    weight_vector: np.ndarray  # (d,)
    threshold: float
    class_means: np.ndarray  # (2, d): row 0 female, row 1 male
    pooled_covariance: np.ndarray  # (d, d)
    priors: tuple[float, float]  # (female, male)
    ridge_epsilon: float = 0.0


def lda_fit(x: FeatureMatrix, equal_priors: bool = False) -> LdaModel:
    """Fit the two-class linear discriminant.

    The decision threshold places the boundary halfway between the projected
    class means, shifted by the log prior ratio.  If the pooled covariance is
    numerically singular an eps*I ridge with eps = 1e-8 * trace(S)/d is added
    and recorded.
    """
    female = np.array([l == FEMALE for l in x.labels])
    n_f, n_m = int(female.sum()), int((~female).sum())
    if n_f < 2 or n_m < 2:
        raise SingleClassError(f"need >= 2 members per class, got female={n_f} male={n_m}")
    xf, xm = x.rows[female], x.rows[~female]
    mu_f, mu_m = xf.mean(axis=0), xm.mean(axis=0)
    centered_f, centered_m = xf - mu_f, xm - mu_m
    pooled = (centered_f.T @ centered_f + centered_m.T @ centered_m) / (x.n - 2)

    ridge = 0.0
    singular = np.linalg.svd(pooled, compute_uv=False)
    if singular[0] == 0.0 or singular[-1] < singular[0] / _COND_LIMIT:
        ridge = 1e-8 * float(np.trace(pooled)) / x.d
        if ridge == 0.0:
            ridge = 1e-8
        pooled = pooled + ridge * np.eye(x.d)
    weights = np.linalg.solve(pooled, mu_f - mu_m)

    if equal_priors:
        priors = (0.5, 0.5)
    else:
        priors = (n_f / x.n, n_m / x.n)
    threshold = float(0.5 * weights @ (mu_f + mu_m) - np.log(priors[0] / priors[1]))
    return LdaModel(
        weight_vector=weights,
        threshold=threshold,
        class_means=np.stack([mu_f, mu_m]),
        pooled_covariance=pooled,
        priors=priors,
        ridge_epsilon=ridge,
    )


def lda_predict(model: LdaModel, x: np.ndarray) -> tuple[str, float]:
    """Classify one feature vector; ties at the threshold go to female.

    Returns the label and the signed margin (projected score minus
    threshold).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.weight_vector.shape:
        raise DimensionMismatchError(
            f"expected {model.weight_vector.shape[0]} features, got {x.shape}"
        )
    margin = float(model.weight_vector @ x - model.threshold)
    return (FEMALE if margin >= 0.0 else MALE), margin


def lda_predict_batch(model: LdaModel, rows: np.ndarray) -> list[str]:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != model.weight_vector.shape[0]:
        raise DimensionMismatchError(
            f"expected {model.weight_vector.shape[0]} features, got {rows.shape[1]}"
        )
    margins = rows @ model.weight_vector - model.threshold
    return [FEMALE if m >= 0.0 else MALE for m in margins]


def resubstitution_accuracy(x: FeatureMatrix, equal_priors: bool = False) -> float:
    """Fit on all rows and score all rows."""
    model = lda_fit(x, equal_priors=equal_priors)
    predicted = lda_predict_batch(model, x.rows)
    return sum(p == t for p, t in zip(predicted, x.labels)) / x.n


def jackknife_accuracy(x: FeatureMatrix, equal_priors: bool = False) -> float:
    """Leave-one-out accuracy: refit on N-1 rows for every held-out row."""
    correct = 0
    for i in range(x.n):
        keep = np.ones(x.n, dtype=bool)
        keep[i] = False
        model = lda_fit(x.subset(keep), equal_priors=equal_priors)
        label, _ = lda_predict(model, x.rows[i])
        correct += label == x.labels[i]
    return correct / x.n


def save_model(model: LdaModel, path: str | Path) -> None:
    """JSON dump of weights, threshold, priors, and the ridge epsilon."""
    payload = {
        "weight_vector": model.weight_vector.tolist(),
        "threshold": model.threshold,
        "class_means": model.class_means.tolist(),
        "priors": list(model.priors),
        "ridge_epsilon": model.ridge_epsilon,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_features(path: str | Path) -> FeatureMatrix:
    """Read a feature CSV with header id,label,<feature names...>."""
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 3 or header[0] != "id" or header[1] != "label":
            raise DiscriminantError(f"{path}: header must start with id,label")
        ids, labels, rows = [], [], []
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            labels.append(row[1].strip().upper())
            rows.append([float(v) for v in row[2:]])
    return FeatureMatrix(
        rows=np.array(rows, dtype=np.float64),
        labels=tuple(labels),
        feature_names=tuple(header[2:]),
        ids=tuple(ids),
    )


def save_features(x: FeatureMatrix, path: str | Path) -> None:
    names = x.feature_names or tuple(f"f{i}" for i in range(x.d))
    ids = x.ids or tuple(str(i) for i in range(x.n))
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", *names])
        for rid, label, row in zip(ids, x.labels, x.rows):
            writer.writerow([rid, label, *(f"{v:.9g}" for v in row)])
