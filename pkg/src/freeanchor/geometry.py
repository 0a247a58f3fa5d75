"""Box arithmetic, anchor grids, delta coding, SmoothL1 and greedy NMS.

Boxes are stored in corner form ``(x1, y1, x2, y2)``. Batched functions take
``(N, 4)`` float64 arrays; the scalar helpers accept anything indexable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Raised for invalid anchor / bag / hyper-parameter configuration."""


class BoxCodingError(ValueError):
    """Raised when a box cannot be encoded or decoded."""


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2


def as_boxes(boxes) -> np.ndarray:
    """Coerce a list of boxes (or an array) to a float64 ``(N, 4)`` array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return arr.reshape(-1, 4)


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner-form boxes; 0 if the union is empty."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(objects, anchors) -> np.ndarray:
    """Pairwise IoU, shape ``(len(objects), len(anchors))``."""
    b = as_boxes(objects)
    a = as_boxes(anchors)
    if a.shape[0] == 0:
        raise ConfigurationError("anchor list must be non-empty")
    if b.shape[0] == 0:
        return np.zeros((0, a.shape[0]), dtype=np.float64)
    lt = np.maximum(b[:, None, :2], a[None, :, :2])
    rb = np.minimum(b[:, None, 2:], a[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(b)[:, None] + box_area(a)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_iou(a, b) -> np.ndarray:
    """Elementwise IoU between two aligned ``(N, 4)`` arrays."""
    a = as_boxes(a)
    b = as_boxes(b)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass(frozen=True)
class AnchorLayout:
    """Anchor grid description.

    ``scales`` are per level: anchor side length for a 1:1 ratio (area
    ``scale**2`` is kept for every ratio). ``ratios`` are height / width.
    """

    strides: tuple[int, ...]
    scales: tuple[tuple[float, ...], ...]
    ratios: tuple[float, ...]
    width: int
    height: int

    def __post_init__(self):
        if len(self.strides) == 0:
            raise ConfigurationError("at least one stride is required")
        if len(self.scales) != len(self.strides):
            raise ConfigurationError("need one scale list per stride level")
        if len(self.ratios) == 0 or any(len(s) == 0 for s in self.scales):
            raise ConfigurationError("scales and ratios must be non-empty")
        for s in self.strides:
            if s <= 0 or self.width // s < 1 or self.height // s < 1:
                raise ConfigurationError(f"stride {s} leaves no cell in a {self.width}x{self.height} image")
        if any(r <= 0 for r in self.ratios) or any(x <= 0 for lv in self.scales for x in lv):
            raise ConfigurationError("scales and ratios must be positive")

    def count(self) -> int:
        return sum(
            (self.width // s) * (self.height // s) * len(sc) * len(self.ratios)
            for s, sc in zip(self.strides, self.scales)
        )

    def to_dict(self) -> dict:
        return {
            "strides": list(self.strides),
            "scales": [list(s) for s in self.scales],
            "ratios": list(self.ratios),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorLayout":
        return cls(
            strides=tuple(int(s) for s in d["strides"]),
            scales=tuple(tuple(float(x) for x in s) for s in d["scales"]),
            ratios=tuple(float(r) for r in d["ratios"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def generate_anchors(layout: AnchorLayout) -> np.ndarray:
    """Anchors ordered level-major, then row-major cells, then scale, then ratio."""
    out = []
    ratios = np.asarray(layout.ratios, dtype=np.float64)
    for stride, scales in zip(layout.strides, layout.scales):
        nx, ny = layout.width // stride, layout.height // stride
        sc = np.asarray(scales, dtype=np.float64)
        # (S, R) sizes with area scale**2 and h / w = ratio
        ws = sc[:, None] / np.sqrt(ratios)[None, :]
        hs = sc[:, None] * np.sqrt(ratios)[None, :]
        cy, cx = np.meshgrid((np.arange(ny) + 0.5) * stride, (np.arange(nx) + 0.5) * stride, indexing="ij")
        cx = cx.reshape(-1, 1, 1)
        cy = cy.reshape(-1, 1, 1)
        boxes = np.stack(
            np.broadcast_arrays(cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2), axis=-1
        )
        out.append(boxes.reshape(-1, 4))
    return np.concatenate(out, axis=0)


def encode_deltas(anchors, targets) -> np.ndarray:
    """R-CNN center/log-size regression targets; no variance scaling."""
    a = as_boxes(anchors)
    t = as_boxes(targets)
    wa, ha = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    wt, ht = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise BoxCodingError("anchor must have positive width and height")
    if np.any(wt <= 0) or np.any(ht <= 0):
        raise BoxCodingError("target must have positive width and height")
    dx = (0.5 * (t[:, 0] + t[:, 2]) - 0.5 * (a[:, 0] + a[:, 2])) / wa
    dy = (0.5 * (t[:, 1] + t[:, 3]) - 0.5 * (a[:, 1] + a[:, 3])) / ha
    return np.stack([dx, dy, np.log(wt / wa), np.log(ht / ha)], axis=1)


def decode_deltas(anchors, deltas, clip_log: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode_deltas`.

    ``clip_log`` bounds the log-size deltas (used at inference so untrained
    heads cannot overflow); without it a non-finite size raises.
    """
    a = as_boxes(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa, ha = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise BoxCodingError("anchor must have positive width and height")
    dw, dh = d[:, 2], d[:, 3]
    if clip_log is not None:
        dw = np.clip(dw, -clip_log, clip_log)
        dh = np.clip(dh, -clip_log, clip_log)
    with np.errstate(over="ignore"):
        w = wa * np.exp(dw)
        h = ha * np.exp(dh)
    cx = 0.5 * (a[:, 0] + a[:, 2]) + d[:, 0] * wa
    cy = 0.5 * (a[:, 1] + a[:, 3]) + d[:, 1] * ha
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if not np.all(np.isfinite(out)):
        raise BoxCodingError("deltas produce non-finite box")
    return out


def smooth_l1(pred, target) -> float | np.ndarray:
    """Sum over the last axis of 0.5 u^2 (|u| < 1) or |u| - 0.5."""
    u = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    au = np.abs(u)
    v = np.where(au < 1.0, 0.5 * u * u, au - 0.5)
    return v.sum(axis=-1)


def smooth_l1_grad(pred, target) -> np.ndarray:
    """Derivative of :func:`smooth_l1` w.r.t. ``pred``."""
    u = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.clip(u, -1.0, 1.0)


def nms(boxes, scores, threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order.

    A box is suppressed iff its IoU with an already-kept box exceeds
    ``threshold``. Equal scores keep the lower input index first.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if b.shape[0] == 0:
        return []
    order = np.lexsort((np.arange(s.size), -s))
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    areas = box_area(b)
    keep = []
    alive = np.ones(s.size, dtype=bool)
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if rest.size == 0:
            continue
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        np.divide(inter, union, out=ov, where=union > 0)
        alive[rest[ov > threshold]] = False
    return keep


def aspect_ratio(boxes) -> np.ndarray:
    """max(w/h, h/w) per box."""
    b = as_boxes(boxes)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return np.maximum(w / h, h / w)
