"""Per-anchor matching confidence of one scene across training snapshots."""

from __future__ import annotations

import csv

import numpy as np

from .geometry import decode_deltas
from .inference import DECODE_CLIP
from .loss import HyperParams, _bag_log_confidence
from .matching import build_anchor_bags, compute_match_probabilities
from .model import ModelParams, extract_features, forward

TRACE_HEADER = ["iteration", "anchor_index", "anchor_cx", "anchor_cy", "object_index", "confidence", "match_probability"]


def trace_rows(params: ModelParams, scene, anchors: np.ndarray, hp: HyperParams, iteration: int, features=None) -> list[list]:
    """One row per (object, bag anchor): P^cls * P^loc and P{a_j -> b_i}."""
    if features is None:
        features = extract_features(scene, anchors)
    pred = forward(params, features)
    bags = build_anchor_bags(scene.boxes, anchors, hp.n) if scene.crowdedness else []
    boxes = decode_deltas(anchors, pred.deltas, clip_log=DECODE_CLIP)
    match = compute_match_probabilities(bags, scene.boxes, boxes, len(anchors), hp.t)
    rows = []
    for bag, probs in zip(bags, match.per_object):
        log_x = _bag_log_confidence(pred, anchors, scene.boxes, scene.labels, bag, hp.beta)[0]
        for j, lx, p in zip(bag.indices, log_x, probs):
            a = anchors[j]
            rows.append([
                int(iteration),
                int(j),
                float(0.5 * (a[0] + a[2])),
                float(0.5 * (a[1] + a[3])),
                int(bag.object_index),
                float(np.exp(lx)),
                float(p),
            ])
    return rows


def write_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
