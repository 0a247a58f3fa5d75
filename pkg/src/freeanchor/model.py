"""Toy differentiable detector: pooled window features and a shared MLP head.

The head maps each anchor's feature vector to ``k`` class logits followed by
4 box deltas. Hidden layers use ``tanh`` so finite-difference checks stay
clean everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import as_boxes
from .loss import Predictions

CHECKPOINT_VERSION = 1

# (grid cells per side, window size relative to the anchor)
WINDOWS = ((4, 1.5), (3, 3.0))
SIZE_REF = 16.0


class TrainingError(RuntimeError):
    """Raised when an update would produce non-finite parameters."""


def prior_bias(rho: float) -> float:
    """Classification bias b = -log((1 - rho) / rho), so sigmoid(b) = rho."""
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    return -math.log((1.0 - rho) / rho)


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    num_classes: int
    seed: int = 0
    rho: float = 0.02

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        arrays = []
        pos = 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        return ModelParams(arrays[0::2], arrays[1::2], self.num_classes, self.seed, self.rho)

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flat())


def init_params(d: int, k: int, rho: float = 0.02, seed: int = 0, hidden: tuple[int, ...] = (32,)) -> ModelParams:
    """Small random weights; the class-logit biases start at the prior ``rho``."""
    if d < 1 or k < 1:
        raise ValueError("feature dimension and class count must be positive")
    rng = np.random.default_rng(seed)
    sizes = [d, *hidden, k + 4]
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        std = 0.01 if last else 1.0 / math.sqrt(n_in)
        weights.append(rng.normal(0.0, std, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    biases[-1][:k] = prior_bias(rho)
    return ModelParams(weights, biases, k, seed, rho)


def _activations(params: ModelParams, features: np.ndarray) -> list[np.ndarray]:
    acts = [features]
    h = features
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < len(params.weights) - 1:
            h = np.tanh(h)
        acts.append(h)
    return acts


def forward(params: ModelParams, features: np.ndarray) -> Predictions:
    out = _activations(params, np.asarray(features, dtype=np.float64))[-1]
    k = params.num_classes
    return Predictions(logits=out[:, :k].copy(), deltas=out[:, k:].copy())


def backward(params: ModelParams, features: np.ndarray, grad_logits: np.ndarray, grad_deltas: np.ndarray) -> ModelParams:
    """Parameter gradients given upstream gradients on logits and deltas."""
    acts = _activations(params, np.asarray(features, dtype=np.float64))
    g = np.concatenate([grad_logits, grad_deltas], axis=1)
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for i in reversed(range(n_layers)):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return ModelParams(gw, gb, params.num_classes, params.seed, params.rho)


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    lr: float,
    momentum: float = 0.0,
    velocity: np.ndarray | None = None,
) -> tuple[ModelParams, np.ndarray]:
    """theta <- theta - lr * v with v = momentum * v + grad (plain SGD when momentum is 0)."""
    g = grads.flat()
    if not np.all(np.isfinite(g)):
        bad = int(np.count_nonzero(~np.isfinite(g)))
        raise TrainingError(f"{bad} non-finite gradient entries (lr={lr})")
    if momentum and velocity is not None:
        v = momentum * velocity + g
    else:
        v = g
    return params.with_flat(params.flat() - lr * v), v


def save_checkpoint(path, params: ModelParams, **extra) -> None:
    """JSON checkpoint; floats are written with ``repr`` so reload is bit-exact."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "feature_dim": params.feature_dim,
        "hidden": list(params.hidden),
        "num_classes": params.num_classes,
        "seed": params.seed,
        "rho": params.rho,
        "params": [a.ravel().tolist() for a in params.arrays()],
        "shapes": [list(a.shape) for a in params.arrays()],
    }
    for key, value in extra.items():
        doc[key] = value.tolist() if isinstance(value, np.ndarray) else value
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    arrays = [np.asarray(v, dtype=np.float64).reshape(s) for v, s in zip(doc["params"], doc["shapes"])]
    params = ModelParams(arrays[0::2], arrays[1::2], int(doc["num_classes"]), int(doc["seed"]), float(doc["rho"]))
    extra = {k: v for k, v in doc.items() if k not in {"params", "shapes"}}
    return params, extra


# ---------------------------------------------------------------------------
# features


def feature_dim(windows=WINDOWS) -> int:
    return sum(3 * g * g for g, _ in windows) + 2


@dataclass
class IntegralImages:
    """Summed-area tables of intensity, |d/dx| and |d/dy| (shape (3, H+1, W+1))."""

    tables: np.ndarray
    width: int
    height: int

    @classmethod
    def from_raster(cls, raster: np.ndarray) -> "IntegralImages":
        img = np.asarray(raster, dtype=np.float64) / 255.0
        H, W = img.shape
        gx = np.zeros_like(img)
        gy = np.zeros_like(img)
        gx[:, 1:] = np.abs(np.diff(img, axis=1))
        gy[1:, :] = np.abs(np.diff(img, axis=0))
        chans = np.stack([img, gx, gy])
        tables = np.zeros((3, H + 1, W + 1))
        tables[:, 1:, 1:] = chans.cumsum(axis=1).cumsum(axis=2)
        return cls(tables, W, H)


def extract_features(scene_or_raster, anchors, windows=WINDOWS) -> np.ndarray:
    """Per-anchor pooled statistics over grids laid on context windows.

    For every window the anchor is scaled about its center, split into a
    ``g x g`` grid, and each cell contributes its mean intensity, mean
    horizontal and mean vertical gradient magnitude. Pixels outside the
    image count as zero. Two log-size components close the vector.
    """
    raster = getattr(scene_or_raster, "raster", scene_or_raster)
    ii = scene_or_raster if isinstance(scene_or_raster, IntegralImages) else IntegralImages.from_raster(raster)
    a = as_boxes(anchors)
    cx = 0.5 * (a[:, 0] + a[:, 2])
    cy = 0.5 * (a[:, 1] + a[:, 3])
    w = a[:, 2] - a[:, 0]
    h = a[:, 3] - a[:, 1]
    parts = []
    for g, scale in windows:
        edges = np.linspace(-0.5, 0.5, g + 1) * scale
        xs = np.floor(cx[:, None] + edges[None, :] * w[:, None] + 0.5).astype(np.int64)
        ys = np.floor(cy[:, None] + edges[None, :] * h[:, None] + 0.5).astype(np.int64)
        x0, x1 = xs[:, :-1], xs[:, 1:]
        y0, y1 = ys[:, :-1], ys[:, 1:]
        # cell areas before clipping: outside pixels act as zeros
        area = np.maximum((y1 - y0)[:, :, None] * (x1 - x0)[:, None, :], 1)
        x0c, x1c = np.clip(x0, 0, ii.width), np.clip(x1, 0, ii.width)
        y0c, y1c = np.clip(y0, 0, ii.height), np.clip(y1, 0, ii.height)
        T = ii.tables
        Y0, Y1 = y0c[:, :, None], y1c[:, :, None]
        X0, X1 = x0c[:, None, :], x1c[:, None, :]
        sums = T[:, Y1, X1] - T[:, Y0, X1] - T[:, Y1, X0] + T[:, Y0, X0]  # (3, N, g, g)
        # clamp round-off from the table differences
        means = np.maximum(sums, 0.0) / area[None]
        parts.append(means.transpose(1, 0, 2, 3).reshape(a.shape[0], -1))
    parts.append(np.stack([np.log(w / SIZE_REF), np.log(h / SIZE_REF)], axis=1))
    return np.concatenate(parts, axis=1)
