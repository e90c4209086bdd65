"""Reliability gate for retrieved imagery.

Appearance agreement is measured by windowed zero-normalized cross-correlation
(ZNCC) between the onboard image and the aligned geographic view; distance is
squashed with ``tanh``. A logistic model over ``[mean Diff, tanh(d / s)]``
gives the reliability ``w``, and :func:`calibrate` fits it to binary labels by
full-batch gradient descent on binary cross-entropy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from georetrieval import raster

DEFAULT_KERNEL = 9
DEFAULT_EPS = 1e-6
DEFAULT_SCALE = 10.0
# windows with variance below this count as constant
_FLAT = 1e-12


class SizeMismatch(ValueError):
    pass


class SingleClass(ValueError):
    """Calibration needs both valid and invalid samples."""


@dataclass(frozen=True)
class GateFeatures:
    diff_mean: float
    dist_feat: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.diff_mean <= 1.0:
            raise ValueError(f"diff_mean out of [0, 1]: {self.diff_mean}")
        if not 0.0 <= self.dist_feat < 1.0:
            raise ValueError(f"dist_feat out of [0, 1): {self.dist_feat}")

    def as_array(self) -> np.ndarray:
        return np.array([self.diff_mean, self.dist_feat])


@dataclass(frozen=True)
class GateParams:
    weights: Tuple[float, float] = (-8.0, -4.0)
    bias: float = 4.0
    s: float = DEFAULT_SCALE
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if not self.s > 0 or not self.eps > 0:
            raise ValueError("s and eps must be positive")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    def to_dict(self) -> dict:
        return {"w1": self.weights[0], "w2": self.weights[1], "b": self.bias, "s": self.s, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "GateParams":
        return cls((d["w1"], d["w2"]), d["b"], d.get("s", DEFAULT_SCALE), d.get("eps", DEFAULT_EPS))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GateParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _box_mean(a: np.ndarray, r: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window, shrunk at the borders to the in-image part."""
    h, w = a.shape
    S = np.zeros((h + 1, w + 1))
    S[1:, 1:] = a.cumsum(0).cumsum(1)
    i = np.arange(h)
    j = np.arange(w)
    i0, i1 = np.clip(i - r, 0, h), np.clip(i + r + 1, 0, h)
    j0, j1 = np.clip(j - r, 0, w), np.clip(j + r + 1, 0, w)
    total = S[i1][:, j1] - S[i0][:, j1] - S[i1][:, j0] + S[i0][:, j0]
    count = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return total / count


def zncc_map(a: np.ndarray, b: np.ndarray, kernel: int = DEFAULT_KERNEL, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-pixel ZNCC over ``kernel`` x ``kernel`` windows.

    RGB input is reduced to BT.601 luma; values are used on their given scale.
    Windows where either side is constant score 0.
    """
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 3")
    x = raster.luma(a)
    y = raster.luma(b)
    if x.shape != y.shape:
        raise SizeMismatch(f"{x.shape} vs {y.shape}")
    r = kernel // 2
    # remove global means first so the window moments stay well conditioned
    x = x - x.mean()
    y = y - y.mean()
    mx, my = _box_mean(x, r), _box_mean(y, r)
    vx = np.maximum(_box_mean(x * x, r) - mx * mx, 0.0)
    vy = np.maximum(_box_mean(y * y, r) - my * my, 0.0)
    cov = _box_mean(x * y, r) - mx * my
    flat = (vx <= _FLAT) | (vy <= _FLAT)
    out = np.where(flat, 0.0, cov / (np.sqrt(vx * vy) + eps))
    return np.clip(out, -1.0, 1.0)


def align_geo_to_onboard(geo: np.ndarray, onboard_size: Tuple[int, int]) -> np.ndarray:
    """Resize ``geo`` preserving aspect until it covers ``(height, width)``, then center-crop."""
    th, tw = onboard_size
    h, w = geo.shape[:2]
    if (h, w) == (th, tw):
        return geo
    scale = max(th / h, tw / w)
    rh, rw = max(th, round(h * scale)), max(tw, round(w * scale))
    resized = raster.resize_bilinear(geo, rh, rw)
    top, left = (rh - th) // 2, (rw - tw) // 2
    return resized[top:top + th, left:left + tw]


def _normalized(img: np.ndarray) -> np.ndarray:
    return raster.luma(img) / 255.0


def gate_features(onboard: np.ndarray, geo: np.ndarray, d_gps: float,
                  params: GateParams = GateParams(), valid: Optional[np.ndarray] = None,
                  kernel: int = DEFAULT_KERNEL) -> GateFeatures:
    """Mean normalized difference ``(1 - ZNCC) / 2`` and ``tanh(d_gps / s)``.

    Intensities (0-255 scale) are mapped to ``[0, 1]`` before correlation.
    ``valid`` restricts the mean to pixels where the geographic view exists;
    with no valid pixel the difference is maximal.
    """
    if d_gps < 0:
        raise ValueError("d_gps must be non-negative")
    if valid is not None and valid.shape != geo.shape[:2]:
        raise SizeMismatch("validity mask does not match the geographic image")
    size = onboard.shape[:2]
    aligned = align_geo_to_onboard(geo, size)
    z = zncc_map(_normalized(onboard), _normalized(aligned), kernel, params.eps)
    diff = (1.0 - z) / 2.0
    if valid is not None:
        v = align_geo_to_onboard(valid.astype(float), size) > 0.999
        diff_mean = float(diff[v].mean()) if v.any() else 1.0
    else:
        diff_mean = float(diff.mean())
    return GateFeatures(min(max(diff_mean, 0.0), 1.0), math.tanh(d_gps / params.s))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def gate_score(f: GateFeatures, params: GateParams = GateParams()) -> float:
    w1, w2 = params.weights
    return float(_sigmoid(w1 * f.diff_mean + w2 * f.dist_feat + params.bias))


def _design(features) -> np.ndarray:
    X = np.array([f.as_array() if isinstance(f, GateFeatures) else f for f in features], dtype=float)
    return X.reshape(-1, 2)


def bce_loss(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy of logistic parameters ``theta = (w1, w2, b)``."""
    z = X @ theta[:2] + theta[2]
    # log(1 + e^z) - y z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def bce_gradient(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = X @ theta[:2] + theta[2]
    r = _sigmoid(z) - y
    return np.concatenate([X.T @ r, [r.sum()]]) / len(y)


@dataclass
class Calibration:
    params: GateParams
    losses: List[float] = field(default_factory=list)


def calibrate_with_history(features: Sequence, labels: Sequence[int], epochs: int = 500,
                           lr: float = 0.1, seed: int = 0, init_scale: float = 0.01,
                           s: float = DEFAULT_SCALE, eps: float = DEFAULT_EPS) -> Calibration:
    X = _design(features)
    y = np.asarray(labels, dtype=float)
    if len(y) != len(X):
        raise ValueError("features and labels differ in length")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise SingleClass("calibration needs both label classes")
    theta = np.random.default_rng(seed).normal(0.0, init_scale, size=3)
    losses = [bce_loss(theta, X, y)]
    for _ in range(epochs):
        theta = theta - lr * bce_gradient(theta, X, y)
        losses.append(bce_loss(theta, X, y))
    return Calibration(GateParams((theta[0], theta[1]), float(theta[2]), s, eps), losses)


def calibrate(features: Sequence, labels: Sequence[int], epochs: int = 500, lr: float = 0.1,
              seed: int = 0, **kw) -> GateParams:
    """Fit gate parameters to binary labels (1 valid, 0 invalid or missing)."""
    return calibrate_with_history(features, labels, epochs, lr, seed, **kw).params


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    pos, neg = s[y == 1], s[y == 0]
    if not len(pos) or not len(neg):
        raise SingleClass("AUC needs both classes")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


# -- synthetic data and CSV -------------------------------------------------------------

SYNTHETIC_CSV = Path(__file__).with_name("data") / "synthetic_gate.csv"


def synthetic_features(n_per_class: int = 200, sigma: float = 0.1, seed: int = 0):
    """Separable feature set: valid around (0, 0), invalid around (1, 1), clipped to range."""
    rng = np.random.default_rng(seed)
    valid = rng.normal(0.0, sigma, size=(n_per_class, 2))
    invalid = rng.normal(1.0, sigma, size=(n_per_class, 2))
    X = np.clip(np.vstack([valid, invalid]), 0.0, [1.0, 1.0 - 1e-9])
    y = np.r_[np.ones(n_per_class, dtype=int), np.zeros(n_per_class, dtype=int)]
    return X, y


@dataclass(frozen=True)
class LabeledSample:
    frame_id: str
    features: GateFeatures
    label: int


def read_feature_csv(path) -> List[LabeledSample]:
    """Rows ``frame_id, diff_mean, dist_feat, label``; unlabeled rows (empty or -1) are skipped."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            lab = (row.get("label") or "").strip()
            if lab in ("", "-1", "unlabeled"):
                continue
            label = {"valid": 1, "invalid": 0}.get(lab)
            out.append(LabeledSample(
                row["frame_id"],
                GateFeatures(float(row["diff_mean"]), float(row["dist_feat"])),
                int(lab) if label is None else label,
            ))
    return out


def write_feature_csv(path, samples: Iterable[LabeledSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "diff_mean", "dist_feat", "label"])
        for s in samples:
            w.writerow([s.frame_id, repr(float(s.features.diff_mean)), repr(float(s.features.dist_feat)), s.label])


def synthetic_samples(**kw) -> List[LabeledSample]:
    X, y = synthetic_features(**kw)
    return [LabeledSample(f"syn{i:04d}", GateFeatures(*X[i]), int(y[i])) for i in range(len(y))]
