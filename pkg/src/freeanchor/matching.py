"""Anchor bags, the hand-crafted IoU assignment, and match probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ConfigurationError, as_boxes, iou_matrix, pairwise_iou


@dataclass(frozen=True)
class AnchorBag:
    object_index: int
    indices: np.ndarray  # (m,) int, sorted by descending IoU, ties by lower index
    ious: np.ndarray  # (m,) anchor-object IoU for ``indices``

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass
class MatchProbabilities:
    """P{a_j -> b_i} restricted to bag members, plus P{a_j in A-} per anchor."""

    per_object: list[np.ndarray]  # aligned with each bag's indices
    background: np.ndarray  # (|A|,)


def build_anchor_bags(objects, anchors, n: int, ious: np.ndarray | None = None) -> list[AnchorBag]:
    """Top-``n`` anchors by IoU for every object."""
    if n <= 0:
        raise ConfigurationError(f"bag size must be positive, got {n}")
    if ious is None:
        ious = iou_matrix(objects, anchors)
    num_anchors = ious.shape[1]
    m = min(n, num_anchors)
    idx = np.arange(num_anchors)
    bags = []
    for i in range(ious.shape[0]):
        # lexsort: last key is primary -> descending IoU, then ascending index
        order = np.lexsort((idx, -ious[i]))[:m]
        bags.append(AnchorBag(i, order, ious[i, order]))
    return bags


def build_iou_assignment(objects, anchors, iou_threshold: float, ious: np.ndarray | None = None) -> np.ndarray:
    """Binary matrix C with C_ij = 1 iff IoU > threshold and i is the anchor's best object."""
    if ious is None:
        ious = iou_matrix(objects, anchors)
    C = np.zeros(ious.shape, dtype=np.int8)
    if ious.shape[0] == 0:
        return C
    best = np.argmax(ious, axis=0)  # first max -> lower object index on ties
    cols = np.arange(ious.shape[1])
    ok = ious[best, cols] > iou_threshold
    C[best[ok], cols[ok]] = 1
    return C


def saturated_linear(x, t1: float, t2: float):
    """0 below ``t1``, 1 above ``t2``, linear in between."""
    if not t1 < t2:
        raise ValueError(f"saturated_linear needs t1 < t2, got t1={t1}, t2={t2}")
    x = np.asarray(x, dtype=np.float64)
    out = np.clip((x - t1) / (t2 - t1), 0.0, 1.0)
    return out if out.ndim else float(out)


def match_probability(pred_boxes, obj, t: float) -> np.ndarray:
    """P{a_j -> b_i} over one bag given its decoded predicted boxes.

    Uses IoU between predicted boxes and the object, ramped from ``t`` to the
    bag maximum. If the maximum does not exceed ``t`` every entry is 0.
    """
    pred = as_boxes(pred_boxes)
    target = np.broadcast_to(np.asarray(obj, dtype=np.float64), pred.shape)
    ious = pairwise_iou(pred, target)
    top = ious.max()
    if top <= t:
        return np.zeros_like(ious)
    return saturated_linear(ious, t, top)


def background_probabilities(bags: list[AnchorBag], probs: list[np.ndarray], num_anchors: int) -> np.ndarray:
    """P{a_j in A-} = 1 - max_i P{a_j -> b_i}; anchors outside all bags get 1."""
    best = np.zeros(num_anchors, dtype=np.float64)
    for bag, p in zip(bags, probs):
        np.maximum.at(best, bag.indices, p)
    return 1.0 - best


def compute_match_probabilities(bags, objects, pred_boxes, num_anchors: int, t: float) -> MatchProbabilities:
    """Match probabilities for all bags from the full predicted-box table."""
    objs = as_boxes(objects)
    pred = as_boxes(pred_boxes)
    per_obj = [match_probability(pred[bag.indices], objs[bag.object_index], t) for bag in bags]
    return MatchProbabilities(per_obj, background_probabilities(bags, per_obj, num_anchors))
