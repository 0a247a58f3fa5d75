"""Turning head outputs into scored detections."""

from __future__ import annotations

import numpy as np

from .evaluation import MAX_DETS, SCORE_FLOOR, DetectionSet, apply_nms
from .geometry import decode_deltas
from .loss import sigmoid
from .model import ModelParams, extract_features, forward

# bound on |log-size delta| when decoding, so untrained heads stay finite
DECODE_CLIP = 4.0


def detect(
    params: ModelParams,
    scene,
    anchors: np.ndarray,
    features: np.ndarray | None = None,
    score_floor: float = SCORE_FLOOR,
    pre_nms_topk: int = 1000,
    nms_threshold: float = 0.5,
    max_dets: int = MAX_DETS,
) -> tuple[DetectionSet, DetectionSet]:
    """Raw (pre-NMS) candidates and final per-class-NMS detections for one scene."""
    if features is None:
        features = extract_features(scene, anchors)
    if features.shape[1] != params.feature_dim:
        raise ValueError(
            f"feature dimension {features.shape[1]} does not match checkpoint ({params.feature_dim})"
        )
    pred = forward(params, features)
    scores = sigmoid(pred.logits)
    boxes = decode_deltas(anchors, pred.deltas, clip_log=DECODE_CLIP)
    a_idx, c_idx = np.nonzero(scores >= score_floor)
    s = scores[a_idx, c_idx]
    order = np.lexsort((a_idx * scores.shape[1] + c_idx, -s))[:pre_nms_topk]
    raw = DetectionSet(
        np.full(order.size, scene.id),
        boxes[a_idx[order]],
        c_idx[order],
        s[order],
    )
    kept = apply_nms(raw, nms_threshold)
    top = np.lexsort((np.arange(len(kept)), -kept.scores))[:max_dets]
    return raw, kept.select(np.sort(top))


def detect_all(params, scenes, anchors, feature_cache=None, **kw) -> tuple[DetectionSet, DetectionSet]:
    raws, finals = [], []
    for scene in scenes:
        feats = feature_cache(scene) if feature_cache is not None else None
        raw, final = detect(params, scene, anchors, feats, **kw)
        raws.append(raw)
        finals.append(final)
    return DetectionSet.concat(raws), DetectionSet.concat(finals)
