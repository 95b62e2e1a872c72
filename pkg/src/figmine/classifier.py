"""Modality classification: hand-crafted image features and a softmax layer.

The model keeps a three-way CT / CXR / Other output and is trained with
plain mini-batch gradient descent on mean cross-entropy. Features are
standardised with statistics from the training split.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from figmine.errors import FigmineError
from figmine.raster import RasterImage

CLASSES: tuple[str, ...] = ("CT", "CXR", "Other")

FEATURE_NAMES: tuple[str, ...] = (
    ("grayscale_spread",)
    + tuple(f"luma_hist_{i:02d}" for i in range(16))
    + ("edge_density", "aspect_ratio", "border_darkness", "center_border_contrast")
)
FEATURE_DIM = len(FEATURE_NAMES)
FEATURE_LONG_SIDE = 256
STD_FLOOR = 1e-8


class DimensionMismatch(FigmineError, ValueError):
    pass


class DegenerateDataset(FigmineError, ValueError):
    pass


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------


def _downscale(pixels: np.ndarray, long_side: int = FEATURE_LONG_SIDE) -> np.ndarray:
    h, w = pixels.shape[:2]
    scale = long_side / max(h, w)
    if scale >= 1.0:
        return pixels
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    rows = ((np.arange(nh) + 0.5) * h / nh).astype(int)
    cols = ((np.arange(nw) + 0.5) * w / nw).astype(int)
    return pixels[rows][:, cols]


def extract_features(image: RasterImage) -> np.ndarray:
    """Feature vector in :data:`FEATURE_NAMES` order.

    ``grayscale_spread`` is the mean over pixels of ``(max(R,G,B) - min(R,G,B)) / 255``:
    0 for any grey image, 1 for a saturated primary colour. ``border_darkness``
    is one minus the mean luma of a frame 5% of the short side thick, and
    ``center_border_contrast`` is the central-half mean luma minus the frame mean.
    All lumas are on the 0-1 scale.
    """
    px = _downscale(image.pixels).astype(np.float64)
    h, w = px.shape[:2]
    spread = float(np.mean(px.max(axis=2) - px.min(axis=2)) / 255.0)
    luma = (px @ np.array([0.299, 0.587, 0.114])) / 255.0

    hist, _ = np.histogram(luma, bins=16, range=(0.0, 1.0))
    hist = hist / hist.sum()

    gx = np.abs(np.diff(luma, axis=1)).mean() if w > 1 else 0.0
    gy = np.abs(np.diff(luma, axis=0)).mean() if h > 1 else 0.0
    edge = float((gx + gy) / 2.0)

    t = max(1, round(0.05 * min(h, w)))
    frame = np.ones((h, w), dtype=bool)
    frame[t : h - t, t : w - t] = False
    border_mean = float(luma[frame].mean())
    center = luma[h // 4 : h - h // 4 or h, w // 4 : w - w // 4 or w]
    contrast = float(center.mean()) - border_mean

    return np.concatenate(
        [[spread], hist, [edge, image.width / image.height, 1.0 - border_mean, contrast]]
    ).astype(np.float64)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    validation_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1 or self.seed < 0:
            raise ValueError("hyperparameters must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray
    bias: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    class_list: tuple[str, ...] = CLASSES
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self) -> None:
        k, d = np.shape(self.weights)
        if k != len(self.class_list) or np.shape(self.bias) != (k,):
            raise DimensionMismatch("weights/bias do not match class list")
        if np.shape(self.feature_mean) != (d,) or np.shape(self.feature_std) != (d,):
            raise DimensionMismatch("normalisation stats do not match weights")
        object.__setattr__(self, "feature_std", np.maximum(np.asarray(self.feature_std, dtype=float), STD_FLOOR))

    @property
    def feature_dim(self) -> int:
        return int(np.shape(self.weights)[1])

    @classmethod
    def zeros(cls, dim: int = FEATURE_DIM, hyperparams: Hyperparams | None = None) -> ModelParams:
        return cls(
            weights=np.zeros((len(CLASSES), dim)),
            bias=np.zeros(len(CLASSES)),
            feature_mean=np.zeros(dim),
            feature_std=np.ones(dim),
            hyperparams=hyperparams or Hyperparams(),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.class_list == other.class_list
            and self.hyperparams == other.hyperparams
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("weights", "bias", "feature_mean", "feature_std")
            )
        )

    def to_dict(self) -> dict[str, Any]:
        hp = self.hyperparams
        return {
            "class_list": list(self.class_list),
            "feature_names": list(FEATURE_NAMES) if self.feature_dim == FEATURE_DIM else None,
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_std": [float(v) for v in self.feature_std],
            "weights": [[float(v) for v in row] for row in self.weights],
            "bias": [float(v) for v in self.bias],
            "hyperparams": {
                "learning_rate": hp.learning_rate,
                "batch_size": hp.batch_size,
                "epochs": hp.epochs,
                "validation_fraction": hp.validation_fraction,
            },
            "seed": hp.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelParams:
        return cls(
            weights=np.array(data["weights"], dtype=float),
            bias=np.array(data["bias"], dtype=float),
            feature_mean=np.array(data["feature_mean"], dtype=float),
            feature_std=np.array(data["feature_std"], dtype=float),
            class_list=tuple(data["class_list"]),
            hyperparams=Hyperparams(seed=data.get("seed", 0), **data.get("hyperparams", {})),
        )

    def save(self, path: str | os.PathLike[str]) -> None:
        # json writes floats with repr(), the shortest string that round-trips exactly
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> ModelParams:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Prediction:
    probs: tuple[float, ...]
    label: str


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    if f.shape[-1] != params.feature_dim:
        raise DimensionMismatch(f"expected {params.feature_dim} features, got {f.shape[-1]}")
    return ((f - params.feature_mean) / params.feature_std) @ params.weights.T + params.bias


def softmax_forward(params: ModelParams, features: np.ndarray) -> Prediction:
    probs = softmax(logits(params, features))
    # argmax returns the first maximum, i.e. ties go to the earlier class
    return Prediction(tuple(float(p) for p in probs), params.class_list[int(np.argmax(probs))])


def predict(params: ModelParams, image: RasterImage) -> Prediction:
    return softmax_forward(params, extract_features(image))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def cross_entropy_and_grad(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over ``x`` (already standardised) and its gradient."""
    z = x @ weights.T + bias
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = float(-log_p[np.arange(n), y].mean())
    delta = np.exp(log_p)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, delta.T @ x, delta.sum(axis=0)


@dataclass
class TrainResult:
    params: ModelParams
    loss_trace: list[float]
    val_trace: list[float]
    best_epoch: int


def _encode_labels(labels: Sequence[Any], class_list: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(class_list)}
    out = []
    for lab in labels:
        if isinstance(lab, (int, np.integer)) and not isinstance(lab, bool):
            out.append(int(lab))
        elif lab in index:
            out.append(index[lab])
        else:
            raise ValueError(f"unknown class {lab!r}")
    return np.asarray(out, dtype=int)


def train_arrays(
    x: np.ndarray,
    labels: Sequence[Any],
    hp: Hyperparams = Hyperparams(),
    class_list: Sequence[str] = CLASSES,
) -> TrainResult:
    x = np.asarray(x, dtype=float)
    y = _encode_labels(labels, class_list)
    k = len(class_list)
    if len(y) == 0 or x.ndim != 2 or len(x) != len(y):
        raise DegenerateDataset("dataset is empty or ragged")
    missing = [class_list[c] for c in range(k) if not np.any(y == c)]
    if missing:
        raise DegenerateDataset(f"classes absent from training data: {missing}")

    rng = np.random.default_rng(hp.seed)
    n_val = int(round(len(y) * hp.validation_fraction))
    train_idx, val_idx = np.arange(len(y)), np.arange(0)
    if n_val >= 1:
        order = rng.permutation(len(y))
        cand_val, cand_train = order[:n_val], order[n_val:]
        if all(np.any(y[cand_train] == c) for c in range(k)):
            train_idx, val_idx = np.sort(cand_train), np.sort(cand_val)

    mean = x[train_idx].mean(axis=0)
    std = np.maximum(x[train_idx].std(axis=0), STD_FLOOR)
    xn = (x - mean) / std
    xt, yt = xn[train_idx], y[train_idx]
    xv, yv = xn[val_idx], y[val_idx]

    w = np.zeros((k, x.shape[1]))
    b = np.zeros(k)
    best = (math.inf, w.copy(), b.copy(), -1)
    loss_trace: list[float] = []
    val_trace: list[float] = []
    for epoch in range(hp.epochs):
        perm = rng.permutation(len(yt))
        for start in range(0, len(perm), hp.batch_size):
            batch = perm[start : start + hp.batch_size]
            _, gw, gb = cross_entropy_and_grad(w, b, xt[batch], yt[batch])
            w -= hp.learning_rate * gw
            b -= hp.learning_rate * gb
        train_loss = cross_entropy_and_grad(w, b, xt, yt)[0]
        loss_trace.append(train_loss)
        score = cross_entropy_and_grad(w, b, xv, yv)[0] if len(yv) else train_loss
        if len(yv):
            val_trace.append(score)
        if score < best[0] or not len(yv):
            best = (score, w.copy(), b.copy(), epoch)

    params = ModelParams(best[1], best[2], mean, std, tuple(class_list), hp)
    return TrainResult(params, loss_trace, val_trace, best[3])


def train(dataset: Sequence[tuple[np.ndarray, str]], hp: Hyperparams = Hyperparams()) -> TrainResult:
    """Fit a softmax layer on ``(feature_vector, class_label)`` pairs."""
    if not dataset:
        raise DegenerateDataset("empty dataset")
    x = np.stack([np.asarray(f, dtype=float) for f, _ in dataset])
    return train_arrays(x, [lab for _, lab in dataset], hp)
