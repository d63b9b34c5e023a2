"""Crop scoring: a texture-feature logistic baseline and an adapter for external scorers.

Feature layout (16 values):

    0-2   per-channel mean
    3-5   per-channel standard deviation
    6-13  normalised histogram of luminance gradient magnitude ``|dx| + |dy|``
          (central differences, one-sided at borders) over [0, 510] in 8 bins
    14    mean luminance variance over all 8x8 windows
    15    mean luminance variance over all 32x32 windows

Luminance is ``0.299 R + 0.587 G + 0.114 B``. Everything is accumulated in integers, so a
crop and its mirror image produce bit-identical vectors.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from multiscale_wsi import _kernels
from multiscale_wsi.cohort import CLASSES, class_weights, label_to_int
from multiscale_wsi.io_utils import atomic_write_text, stable_hash
from multiscale_wsi.raster import Raster

N_FEATURES = 16
MODEL_FORMAT_VERSION = 1
GRAD_BINS = 8
LOCAL_WINDOWS = (8, 32)

# luminance is kept as 1000 * Y so it stays integral
_LUMA_SCALE = 1000


class ClassifierError(ValueError):
    pass


class ExternalScorerError(RuntimeError):
    pass


def featurize(crop: Raster) -> np.ndarray:
    d = np.ascontiguousarray(crop.data)
    h, w = crop.height, crop.width
    n = w * h
    feats = np.empty(N_FEATURES, dtype=np.float64)
    flat = d.reshape(-1, 3).astype(np.int64)
    sums = flat.sum(axis=0)
    sqs = np.einsum("ij,ij->j", flat, flat)
    for ch in range(3):
        s, sq = int(sums[ch]), int(sqs[ch])
        feats[ch] = s / n
        feats[3 + ch] = math.sqrt((n * sq - s * s) / (n * n))
    luma = _kernels.luma_int(d)
    # gradient magnitude is in units of 1 / (2 * 1000) gray; the histogram spans [0, 510] gray
    counts = _kernels.gradient_histogram(luma, GRAD_BINS, 510 * 2 * _LUMA_SCALE)
    feats[6:6 + GRAD_BINS] = counts / n
    for k, size in enumerate(LOCAL_WINDOWS):
        wh, ww = min(size, h), min(size, w)
        hi, lo, count = _kernels.local_variance_total(luma, wh, ww)
        total = int(hi) * (1 << 32) + int(lo)
        feats[6 + GRAD_BINS + k] = total / (count * (wh * ww) ** 2 * _LUMA_SCALE ** 2)
    return feats


def featurize_many(crops: Iterable[Raster]) -> np.ndarray:
    rows = [featurize(c) for c in crops]
    return np.vstack(rows) if rows else np.empty((0, N_FEATURES))


# --- model --------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 15
    learning_rate: float = 0.05
    seed: int = 0
    class_weights: dict | None = None  # None: inverse frequency of the training examples

    def __post_init__(self):
        if self.epochs < 1:
            raise ClassifierError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ClassifierError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ClassifierError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class BaselineModel:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    meta: dict = field(default_factory=dict)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_mean) / self.feature_std

    def decision(self, features: np.ndarray) -> np.ndarray:
        return self.standardize(np.atleast_2d(features)) @ self.weights + self.bias

    def predict_features(self, features: np.ndarray) -> np.ndarray:
        return sigmoid(self.decision(features))

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "feature_mean": [float(v) for v in self.feature_mean],
            "feature_std": [float(v) for v in self.feature_std],
            "meta": self.meta,
        }

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineModel":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ClassifierError(f"unsupported model format_version {d.get('format_version')}")
        arrays = [np.asarray(d[k], dtype=np.float64)
                  for k in ("weights", "feature_mean", "feature_std")]
        if any(a.shape != (N_FEATURES,) for a in arrays):
            raise ClassifierError("model vectors must have 16 entries")
        return cls(arrays[0], float(d["bias"]), arrays[1], arrays[2], dict(d.get("meta", {})))

    @classmethod
    def load(cls, path) -> "BaselineModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def weighted_logistic_loss(w, b, x, y, sample_weight) -> float:
    z = x @ w + b
    return float(np.mean(sample_weight * (np.logaddexp(0.0, z) - y * z)))


def weighted_logistic_grad(w, b, x, y, sample_weight):
    r = sample_weight * (sigmoid(x @ w + b) - y) / len(y)
    return x.T @ r, float(r.sum())


def _int_labels(labels) -> np.ndarray:
    return np.array([lab if isinstance(lab, (int, np.integer)) else label_to_int(lab)
                     for lab in labels], dtype=np.float64)


def _weight_lookup(cw: dict) -> np.ndarray:
    """Class weights keyed by label name or 0/1 -> array indexed by integer label."""
    out = np.empty(2)
    for idx, name in enumerate(CLASSES):
        if name in cw:
            out[idx] = cw[name]
        elif idx in cw:
            out[idx] = cw[idx]
        else:
            raise ClassifierError(f"class weights missing {name}")
    return out


def fit_features(epochs_data, cfg: TrainConfig) -> BaselineModel:
    """Mini-batch gradient descent on the class-weighted logistic loss.

    ``epochs_data`` is a list with one ``(features, labels)`` pair per epoch (the crops
    may differ between epochs); its length must equal ``cfg.epochs``. Standardisation
    statistics come from all rows.
    """
    if len(epochs_data) != cfg.epochs:
        raise ClassifierError(f"got {len(epochs_data)} epochs of data for {cfg.epochs} epochs")
    xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x, _ in epochs_data]
    ys = [_int_labels(y) for _, y in epochs_data]
    first = ys[0]
    if len(np.unique(first)) < 2:
        raise ClassifierError("training needs at least one example of each class")
    allx = np.vstack(xs)
    mean = allx.mean(axis=0)
    std = allx.std(axis=0)
    std[~(std > 0)] = 1.0
    cw = cfg.class_weights
    if cw is None:
        cw = class_weights({c: int((first == i).sum()) for i, c in enumerate(CLASSES)})
    lookup = _weight_lookup(cw)
    w = np.zeros(xs[0].shape[1])
    b = 0.0
    for e in range(cfg.epochs):
        x = (xs[e] - mean) / std
        y = ys[e]
        sw = lookup[y.astype(np.int64)]
        order = np.random.default_rng(stable_hash(cfg.seed, "shuffle", e)).permutation(len(y))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            gw, gb = weighted_logistic_grad(w, b, x[idx], y[idx], sw[idx])
            w = w - cfg.learning_rate * gw
            b = b - cfg.learning_rate * gb
    meta = {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate, "seed": cfg.seed,
            "class_weights": {c: float(lookup[i]) for i, c in enumerate(CLASSES)}}
    return BaselineModel(w, float(b), mean, std, meta)


def train_baseline(crops, cfg: TrainConfig) -> BaselineModel:
    """Train on ``(Raster, label)`` pairs.

    ``crops`` is either a sequence reused every epoch or a callable ``epoch -> sequence``
    supplying fresh (e.g. randomly cropped, augmented) examples per epoch.
    """
    supplier: Callable = crops if callable(crops) else (lambda _e, _c=list(crops): _c)
    data = []
    for e in range(cfg.epochs):
        batch = list(supplier(e))
        data.append((featurize_many(r for r, _ in batch), [lab for _, lab in batch]))
    return fit_features(data, cfg)


def predict(model: BaselineModel, crop: Raster) -> float:
    return float(model.predict_features(featurize(crop))[0])


# --- external scorer ----------------------------------------------------------------------


def score_external(crop_paths, cmd, timeout: float | None = None) -> list[float]:
    """Score PNG crops with an external program.

    The program receives absolute paths on stdin, one per line, and must print one
    decimal score in [0, 1] per line in the same order, then exit 0.
    """
    argv = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
    paths = [str(Path(p).resolve()) for p in crop_paths]
    payload = "".join(p + "\n" for p in paths)
    try:
        proc = subprocess.run(argv, input=payload.encode("utf-8"), capture_output=True,
                              timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise ExternalScorerError(f"cannot run scorer {argv!r}: {exc}") from exc
    if proc.returncode != 0:
        err = proc.stderr.decode("utf-8", "replace").strip()
        raise ExternalScorerError(f"scorer exited with status {proc.returncode}: {err}")
    lines = proc.stdout.decode("utf-8").splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != len(paths):
        raise ExternalScorerError(
            f"count mismatch: scorer returned {len(lines)} scores for {len(paths)} crops")
    scores = []
    for lineno, line in enumerate(lines, start=1):
        try:
            v = float(line.strip())
        except ValueError:
            raise ExternalScorerError(f"malformed score on line {lineno}: {line!r}") from None
        if not 0.0 <= v <= 1.0:
            raise ExternalScorerError(f"score out of range [0,1] on line {lineno}: {line.strip()}")
        scores.append(v)
    return scores
