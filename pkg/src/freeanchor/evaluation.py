"""COCO-style AP, NMS recall, and slender / crowdedness breakdowns."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .geometry import as_boxes, iou_matrix, nms

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
NR_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
CROWD_BUCKETS = ((1, 1), (2, 3), (4, 6), (7, None))
MAX_DETS = 100
SCORE_FLOOR = 0.01


class Detection(NamedTuple):
    scene_id: int
    box: tuple[float, float, float, float]
    cls: int
    score: float


@dataclass
class DetectionSet:
    """Column-wise detections (or ground truths, with scores ignored)."""

    scene_ids: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.scene_ids = np.asarray(self.scene_ids, dtype=np.int64).reshape(-1)
        self.boxes = as_boxes(self.boxes)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return int(self.scene_ids.size)

    @classmethod
    def empty(cls) -> "DetectionSet":
        return cls(np.zeros(0), np.zeros((0, 4)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_list(cls, dets) -> "DetectionSet":
        dets = list(dets)
        if not dets:
            return cls.empty()
        return cls(
            [d.scene_id for d in dets],
            [d.box for d in dets],
            [d.cls for d in dets],
            [d.score for d in dets],
        )

    @classmethod
    def concat(cls, parts) -> "DetectionSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.scene_ids for p in parts]),
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.classes for p in parts]),
            np.concatenate([p.scores for p in parts]),
        )

    def select(self, mask) -> "DetectionSet":
        return DetectionSet(self.scene_ids[mask], self.boxes[mask], self.classes[mask], self.scores[mask])


def ground_truths_from_scenes(scenes) -> DetectionSet:
    parts = [
        DetectionSet(np.full(s.crowdedness, s.id), s.boxes, s.labels, np.ones(s.crowdedness))
        for s in scenes
    ]
    return DetectionSet.concat(parts)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated area under a PR curve."""
    if recall.size == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < env.size, env[np.minimum(idx, env.size - 1)], 0.0)
    return float(vals.mean())


def _match_class(
    dets: DetectionSet,
    gts: DetectionSet,
    gt_ignore: np.ndarray,
    det_ignore: np.ndarray,
    thresholds,
) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Greedy per-scene matching for one class at several IoU thresholds.

    Returns, per threshold, (tp flags, fp flags) over score-sorted detections
    and the number of non-ignored ground truths.
    """
    order = np.argsort(-dets.scores, kind="stable")
    d_scene = dets.scene_ids[order]
    d_boxes = dets.boxes[order]
    d_ign = det_ignore[order]
    npos = int(np.count_nonzero(~gt_ignore))
    gt_by_scene: dict[int, np.ndarray] = {}
    for sid in np.unique(gts.scene_ids):
        gt_by_scene[int(sid)] = np.nonzero(gts.scene_ids == sid)[0]
    ious_by_scene: dict[int, np.ndarray] = {}
    for sid in np.unique(d_scene):
        g = gt_by_scene.get(int(sid))
        if g is not None:
            dmask = np.nonzero(d_scene == sid)[0]
            ious_by_scene[int(sid)] = (dmask, iou_matrix(d_boxes[dmask], gts.boxes[g]))

    # detections in scenes without ground truth of this class
    no_gt = ~np.isin(d_scene, list(ious_by_scene)) & ~d_ign
    results = []
    for thr in thresholds:
        tp = np.zeros(order.size, dtype=bool)
        fp = np.zeros(order.size, dtype=bool)
        taken = np.zeros(len(gts), dtype=bool)
        for sid, (dpos, ious) in ious_by_scene.items():
            g = gt_by_scene[sid]
            ign = gt_ignore[g]
            for row, di in enumerate(dpos):
                best, best_iou = -1, thr
                # non-ignored ground truths take precedence over ignored ones
                for pool in (~ign, ign):
                    cand = np.nonzero(pool & ~taken[g] & (ious[row] >= best_iou))[0]
                    if cand.size:
                        best = cand[np.argmax(ious[row, cand])]
                        break
                if best >= 0:
                    taken[g[best]] = True
                    if not ign[best]:
                        tp[di] = True
                elif not d_ign[di]:
                    fp[di] = True
        fp |= no_gt
        results.append((tp, fp, npos))
    return results


def _pr_curve(tp: np.ndarray, fp: np.ndarray, npos: int) -> tuple[np.ndarray, np.ndarray]:
    keep = tp | fp
    tpc = np.cumsum(tp[keep])
    fpc = np.cumsum(fp[keep])
    recall = tpc / npos
    precision = tpc / np.maximum(tpc + fpc, 1)
    return recall, precision


@dataclass
class APResult:
    ap: float | None  # mean over classes with ground truth, None if no class has any
    per_class: dict[int, float]
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def ap_by_threshold(
    detections: DetectionSet,
    ground_truths: DetectionSet,
    thresholds=AP_THRESHOLDS,
    gt_ignore: np.ndarray | None = None,
    det_ignore: np.ndarray | None = None,
) -> dict[float, APResult]:
    if gt_ignore is None:
        gt_ignore = np.zeros(len(ground_truths), dtype=bool)
    if det_ignore is None:
        det_ignore = np.zeros(len(detections), dtype=bool)
    out = {thr: APResult(None, {}) for thr in thresholds}
    for c in np.unique(ground_truths.classes):
        gmask = ground_truths.classes == c
        if not np.any(~gt_ignore[gmask]):
            continue
        dmask = detections.classes == c
        per_thr = _match_class(
            detections.select(dmask), ground_truths.select(gmask), gt_ignore[gmask], det_ignore[dmask], thresholds
        )
        for thr, (tp, fp, npos) in zip(thresholds, per_thr):
            recall, precision = _pr_curve(tp, fp, npos)
            out[thr].per_class[int(c)] = interpolated_ap(recall, precision)
            out[thr].curves[int(c)] = (recall, precision)
    for res in out.values():
        if res.per_class:
            res.ap = float(np.mean(list(res.per_class.values())))
    return out


def average_precision(detections: DetectionSet, ground_truths: DetectionSet, iou_threshold: float) -> float:
    """Class-averaged 101-point AP at one IoU threshold (0 when nothing to score)."""
    res = ap_by_threshold(detections, ground_truths, (iou_threshold,))[iou_threshold]
    return 0.0 if res.ap is None else res.ap


def coco_ap(detections, ground_truths, gt_ignore=None, det_ignore=None) -> dict | None:
    """AP averaged over 0.50:0.05:0.95 plus AP50, AP75 and per-class AP."""
    by_thr = ap_by_threshold(detections, ground_truths, AP_THRESHOLDS, gt_ignore, det_ignore)
    if by_thr[0.5].ap is None:
        return None
    classes = sorted(by_thr[0.5].per_class)
    return {
        "AP": float(np.mean([r.ap for r in by_thr.values()])),
        "AP50": by_thr[0.5].ap,
        "AP75": by_thr[0.75].ap,
        "per_class": {c: float(np.mean([by_thr[t].per_class[c] for t in AP_THRESHOLDS])) for c in classes},
        "curves": {(c, t): by_thr[t].curves[c] for t in AP_THRESHOLDS for c in classes},
    }


def _recall(dets: DetectionSet, gts: DetectionSet, tau: float) -> float:
    hit = 0
    for sid in np.unique(gts.scene_ids):
        g = gts.boxes[gts.scene_ids == sid]
        d = dets.boxes[dets.scene_ids == sid]
        if d.shape[0]:
            hit += int(np.count_nonzero(iou_matrix(g, d).max(axis=1) >= tau))
    return hit / max(len(gts), 1)


def apply_nms(dets: DetectionSet, threshold: float, per_class: bool = True) -> DetectionSet:
    keep = []
    for sid in np.unique(dets.scene_ids):
        in_scene = dets.scene_ids == sid
        groups = np.unique(dets.classes[in_scene]) if per_class else [None]
        for c in groups:
            mask = in_scene if c is None else in_scene & (dets.classes == c)
            idx = np.nonzero(mask)[0]
            keep.extend(idx[nms(dets.boxes[idx], dets.scores[idx], threshold)])
    return dets.select(np.sort(np.asarray(keep, dtype=np.int64)))


def nms_recall(raw_detections: DetectionSet, ground_truths: DetectionSet, taus=NR_THRESHOLDS, nms_threshold: float = 0.5) -> dict:
    """Class-agnostic recall after / before NMS at each tau, and their mean.

    Undefined ratios (zero recall before NMS) are reported as None, listed
    under ``undefined`` and left out of the mean.
    """
    kept = apply_nms(raw_detections, nms_threshold)
    per_tau = {}
    undefined = []
    for tau in taus:
        before = _recall(raw_detections, ground_truths, tau)
        after = _recall(kept, ground_truths, tau)
        if before == 0:
            per_tau[tau] = None
            undefined.append(tau)
        else:
            per_tau[tau] = after / before
    defined = [v for v in per_tau.values() if v is not None]
    return {"NR": float(np.mean(defined)) if defined else None, "NR_tau": per_tau, "undefined": undefined}


def crowd_bucket_label(lo: int, hi: int | None) -> str:
    if hi is None:
        return f"{lo}+"
    return str(lo) if lo == hi else f"{lo}-{hi}"


@dataclass
class EvalReport:
    AP: float | None
    AP50: float | None
    AP75: float | None
    per_class: dict[int, float]
    NR: float | None = None
    NR_tau: dict[float, float | None] = field(default_factory=dict)
    NR_undefined: list[float] = field(default_factory=list)
    shape_AP: dict[str, float] = field(default_factory=dict)
    crowd_AP: dict[str, float] = field(default_factory=dict)
    curves: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        """JSON-ready document; metric values are percentages."""

        def pct(v):
            return None if v is None else round(100.0 * v, 6)

        return {
            "units": "percent",
            "nr_recall": "class-agnostic",
            "AP": pct(self.AP),
            "AP50": pct(self.AP50),
            "AP75": pct(self.AP75),
            "per_class_AP": {str(c): pct(v) for c, v in sorted(self.per_class.items())},
            "NR": pct(self.NR),
            "NR_tau": {f"NR_{int(round(t * 100))}": pct(v) for t, v in sorted(self.NR_tau.items())},
            "NR_undefined": [f"NR_{int(round(t * 100))}" for t in self.NR_undefined],
            "shape_AP": {k: pct(v) for k, v in self.shape_AP.items()},
            "crowd_AP": {k: pct(v) for k, v in self.crowd_AP.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def save_pr_curves(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "iou_threshold", "recall", "precision"])
            for (c, thr), (recall, precision) in sorted(self.curves.items()):
                env = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
                idx = np.searchsorted(recall, RECALL_POINTS, side="left")
                for r, i in zip(RECALL_POINTS, idx):
                    p = env[i] if i < env.size else 0.0
                    writer.writerow([c, f"{thr:.2f}", f"{r:.2f}", repr(float(p))])


def breakdown_report(
    detections: DetectionSet,
    scenes,
    shape_classifier: Callable[[np.ndarray], np.ndarray] | None = None,
    crowd_buckets=CROWD_BUCKETS,
    raw_detections: DetectionSet | None = None,
    nms_threshold: float = 0.5,
) -> EvalReport:
    """Full report: overall AP, per-class AP, slender/square and crowdedness subsets.

    Shape subsets follow COCO's area-range convention: ground truths of the
    other shape are ignored, and unmatched detections count as false
    positives only if their own box falls in the subset. Absent subsets are
    omitted rather than reported as zero.
    """
    from .synthdata import is_slender

    classify = shape_classifier or is_slender
    gts = ground_truths_from_scenes(scenes)
    overall = coco_ap(detections, gts)
    report = EvalReport(
        AP=overall["AP"] if overall else None,
        AP50=overall["AP50"] if overall else None,
        AP75=overall["AP75"] if overall else None,
        per_class=overall["per_class"] if overall else {},
        curves=overall["curves"] if overall else {},
    )
    if len(gts):
        gt_slender = classify(gts.boxes)
        det_slender = classify(detections.boxes) if len(detections) else np.zeros(0, dtype=bool)
        for name, want in (("square", False), ("slender", True)):
            if not np.any(gt_slender == want):
                continue
            res = coco_ap(detections, gts, gt_ignore=gt_slender != want, det_ignore=det_slender != want)
            if res is not None:
                report.shape_AP[name] = res["AP"]
    counts = {s.id: s.crowdedness for s in scenes}
    for lo, hi in crowd_buckets:
        ids = [sid for sid, n in counts.items() if n >= lo and (hi is None or n <= hi)]
        if not ids:
            continue
        dmask = np.isin(detections.scene_ids, ids)
        gmask = np.isin(gts.scene_ids, ids)
        res = coco_ap(detections.select(dmask), gts.select(gmask))
        if res is not None:
            report.crowd_AP[crowd_bucket_label(lo, hi)] = res["AP"]
    if raw_detections is not None and len(gts):
        nr = nms_recall(raw_detections, gts, NR_THRESHOLDS, nms_threshold)
        report.NR = nr["NR"]
        report.NR_tau = nr["NR_tau"]
        report.NR_undefined = nr["undefined"]
    return report
