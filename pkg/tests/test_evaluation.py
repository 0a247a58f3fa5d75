import csv
import json

import numpy as np
import pytest

from freeanchor.evaluation import (
    AP_THRESHOLDS,
    NR_THRESHOLDS,
    Detection,
    DetectionSet,
    apply_nms,
    average_precision,
    breakdown_report,
    coco_ap,
    interpolated_ap,
    nms_recall,
)
from freeanchor.synthdata import DatasetSpec, Scene, generate_dataset


def dets(*rows):
    """rows: (scene_id, box, class, score)."""
    return DetectionSet.from_list(Detection(s, b, c, p) for s, b, c, p in rows)


def gts(*rows):
    return DetectionSet.from_list(Detection(s, b, c, 1.0) for s, b, c in rows)


def points_ap(segments):
    """101-point AP from (max recall of segment, envelope precision) pairs listed by increasing recall."""
    total = 0.0
    for k in range(101):
        r = k / 100
        total += next((p for rmax, p in segments if r <= rmax + 1e-12), 0.0)
    return total / 101


G0, G1, G2 = (0, 0, 10, 10), (20, 0, 30, 10), (40, 0, 50, 10)


class TestAPFixtures:
    def fixture_a(self):
        truth = gts((0, G0, 0), (0, G1, 0), (0, G2, 0))
        found = dets(
            (0, G0, 0, 0.9),  # TP
            (0, G0, 0, 0.8),  # duplicate -> FP
            (0, G1, 0, 0.7),  # TP
            (0, (60, 60, 70, 70), 0, 0.6),  # FP
            (0, (42, 0, 52, 10), 0, 0.5),  # IoU 2/3: TP at 0.5, FP at 0.75
        )
        return found, truth

    def test_fixture_a_iou50(self):
        # PR table: recall 1/3, 1/3, 2/3, 2/3, 1; precision 1, 1/2, 2/3, 1/2, 3/5
        expect = (34 * 1.0 + 33 * (2 / 3) + 34 * 0.6) / 101
        assert expect == pytest.approx(points_ap([(1 / 3, 1.0), (2 / 3, 2 / 3), (1.0, 0.6)]))
        assert average_precision(*self.fixture_a(), 0.5) == pytest.approx(expect, abs=1e-12)

    def test_fixture_a_iou75(self):
        expect = (34 * 1.0 + 33 * (2 / 3)) / 101
        assert average_precision(*self.fixture_a(), 0.75) == pytest.approx(expect, abs=1e-12)

    def test_fixture_b_two_classes_two_scenes(self):
        truth = gts((0, G0, 0), (1, G1, 0), (1, G2, 1))
        found = dets(
            (0, G0, 0, 0.9),  # class 0: TP; second class-0 object never found -> recall 1/2
            (0, G2, 1, 0.8),  # class 1 in a scene without class-1 objects -> FP
            (1, G2, 1, 0.3),  # TP
        )
        ap0 = 51 / 101
        ap1 = 0.5  # precision envelope 1/2 everywhere
        assert average_precision(found, truth, 0.5) == pytest.approx((ap0 + ap1) / 2, abs=1e-12)
        res = coco_ap(found, truth)
        assert res["per_class"][0] == pytest.approx(ap0, abs=1e-12)
        assert res["per_class"][1] == pytest.approx(ap1, abs=1e-12)

    def test_fixture_c_greedy_by_score(self):
        g0, g1 = (0, 0, 10, 10), (4, 0, 14, 10)
        truth = gts((0, g0, 0), (0, g1, 0))
        # first detection prefers g1 (IoU 0.82 vs 0.54); second then finds only g0 at IoU 0.33
        found = dets((0, (3, 0, 13, 10), 0, 0.9), (0, (5, 0, 15, 10), 0, 0.8))
        assert average_precision(found, truth, 0.5) == pytest.approx(51 / 101, abs=1e-12)


class TestAPProperties:
    def random_case(self, seed, n_gt=8, n_det=20):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 50, (n_gt, 2))
        g = np.hstack([xy, xy + rng.uniform(5, 15, (n_gt, 2))])
        truth = DetectionSet(rng.integers(0, 3, n_gt), g, rng.integers(0, 2, n_gt), np.ones(n_gt))
        src = rng.integers(0, n_gt, n_det)
        boxes = g[src] + rng.normal(0, 1.5, (n_det, 4))
        found = DetectionSet(truth.scene_ids[src], boxes, truth.classes[src], rng.uniform(0.05, 1, n_det))
        return found, truth

    def test_perfect(self):
        truth = gts((0, G0, 0), (0, G1, 1), (3, G2, 0))
        found = dets((0, G0, 0, 0.9), (0, G1, 1, 0.8), (3, G2, 0, 0.7))
        for thr in AP_THRESHOLDS:
            assert average_precision(found, truth, thr) == 1.0
        assert coco_ap(found, truth)["AP"] == 1.0

    def test_no_detections(self):
        assert average_precision(DetectionSet.empty(), gts((0, G0, 0)), 0.5) == 0.0

    def test_monotone_score_transform(self):
        for seed in range(20):
            found, truth = self.random_case(seed)
            warped = DetectionSet(found.scene_ids, found.boxes, found.classes, found.scores**3 * 0.5)
            assert coco_ap(found, truth)["AP"] == coco_ap(warped, truth)["AP"]

    def test_duplicate_never_helps(self):
        for seed in range(30):
            found, truth = self.random_case(seed)
            i = seed % len(found)
            dup = DetectionSet.concat([found, found.select(np.array([i]))])
            dup.scores[-1] = found.scores[i] * 0.999
            for thr in (0.5, 0.75):
                assert average_precision(dup, truth, thr) <= average_precision(found, truth, thr) + 1e-12

    def test_non_increasing_in_threshold(self):
        for seed in range(20):
            found, truth = self.random_case(seed)
            vals = [average_precision(found, truth, t) for t in AP_THRESHOLDS]
            assert np.all(np.diff(vals) <= 1e-12)

    def test_interpolation_envelope(self):
        assert interpolated_ap(np.array([0.5, 1.0]), np.array([0.5, 1.0])) == 1.0
        assert interpolated_ap(np.array([]), np.array([])) == 0.0


class TestNMSRecall:
    def test_nothing_removed(self):
        truth = gts((0, G0, 0), (0, G1, 0))
        raw = dets((0, G0, 0, 0.9), (0, G1, 0, 0.8))
        nr = nms_recall(raw, truth)
        assert all(v == 1.0 for v in nr["NR_tau"].values())
        assert nr["NR"] == 1.0 and len(nr["NR_tau"]) == 9

    def test_only_cover_suppressed(self):
        truth = gts((0, G0, 0))
        # the exact box loses to a higher-scored box at IoU 0.54 with it
        raw = dets((0, (3, 0, 13, 10), 0, 0.9), (0, G0, 0, 0.5))
        nr = nms_recall(raw, truth, nms_threshold=0.5)
        assert nr["NR_tau"][0.5] == 1.0
        for tau in NR_THRESHOLDS[1:]:
            assert nr["NR_tau"][tau] == 0.0
        assert nr["NR"] == pytest.approx(1 / 9)

    def test_three_box_hand_count(self):
        truth = gts((0, (0, 0, 10, 10), 0), (0, (4, 0, 14, 10), 0))
        raw = dets(
            (0, (0, 0, 10, 10), 0, 0.9),  # exact on the first object
            (0, (4, 0, 14, 10), 0, 0.8),  # exact on the second; IoU 0.43 with the first, survives
            (0, (2, 0, 12, 10), 0, 0.7),  # IoU 0.67 with both -> suppressed
        )
        nr = nms_recall(raw, truth)
        # both objects are exactly covered before and after NMS
        assert all(v == 1.0 for v in nr["NR_tau"].values())
        raw2 = dets((0, (2, 0, 12, 10), 0, 0.95), (0, (0, 0, 10, 10), 0, 0.9), (0, (4, 0, 14, 10), 0, 0.8))
        nr2 = nms_recall(raw2, truth)
        # before: both exact; after: only the middle box (IoU 2/3 with each)
        for tau in NR_THRESHOLDS:
            assert nr2["NR_tau"][tau] == (1.0 if tau <= 2 / 3 else 0.0)

    def test_undefined_flagged(self):
        truth = gts((0, G0, 0))
        raw = dets((0, (5, 0, 15, 10), 0, 0.9))  # IoU 1/3 with the object
        nr = nms_recall(raw, truth)
        assert nr["NR"] is None
        assert nr["undefined"] == list(NR_THRESHOLDS)

    def test_threshold_one_keeps_all(self):
        rng = np.random.default_rng(0)
        b = rng.uniform(0, 30, (30, 2))
        boxes = np.hstack([b, b + 10])
        raw = DetectionSet(np.zeros(30), boxes, np.zeros(30), rng.uniform(size=30))
        truth = DetectionSet(np.zeros(5), boxes[:5] + 1, np.zeros(5), np.ones(5))
        nr = nms_recall(raw, truth, nms_threshold=1.0)
        assert all(v in (None, 1.0) for v in nr["NR_tau"].values())

    def test_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            b = rng.uniform(0, 30, (25, 2))
            raw = DetectionSet(np.zeros(25), np.hstack([b, b + 12]), rng.integers(0, 2, 25), rng.uniform(size=25))
            g = rng.uniform(0, 30, (4, 2))
            truth = DetectionSet(np.zeros(4), np.hstack([g, g + 12]), np.zeros(4), np.ones(4))
            for v in nms_recall(raw, truth)["NR_tau"].values():
                assert v is None or 0.0 <= v <= 1.0

    def test_apply_nms_per_class(self):
        raw = dets((0, G0, 0, 0.9), (0, G0, 1, 0.8), (0, G0, 0, 0.7))
        kept = apply_nms(raw, 0.5)
        assert sorted(kept.scores.tolist()) == [0.8, 0.9]
        assert len(apply_nms(raw, 0.5, per_class=False)) == 1


class TestBreakdown:
    def scenes(self, **kw):
        return generate_dataset(DatasetSpec(num_scenes=12, **kw))

    def perfect(self, scenes):
        rows = []
        for s in scenes:
            for b, c in zip(s.boxes, s.labels):
                rows.append((s.id, tuple(b), int(c), 0.9))
        return dets(*rows)

    def test_single_bucket(self):
        scenes = self.scenes()
        rep = breakdown_report(self.perfect(scenes), scenes)
        assert list(rep.crowd_AP) == ["1"]
        assert rep.AP == 1.0

    def test_square_only_has_no_slender_subset(self):
        scenes = self.scenes()
        rep = breakdown_report(self.perfect(scenes), scenes)
        assert "slender" not in rep.shape_AP and rep.shape_AP["square"] == 1.0

    def test_mixed_buckets(self):
        scenes = self.scenes(objects_per_scene=(1, 2, 5, 8), shape_mix=(0.5, 0.25, 0.25))
        rep = breakdown_report(self.perfect(scenes), scenes)
        assert set(rep.crowd_AP) <= {"1", "2-3", "4-6", "7+"}
        assert set(rep.shape_AP) == {"square", "slender"}

    def test_subset_ignores_other_shape(self):
        square = (0, 0, 20, 20)
        slender = (30, 0, 36, 30)
        scene = Scene(0, 64, 64, np.zeros((64, 64), np.uint8), np.array([square, slender], float), np.array([0, 0]))
        # only the square object is detected
        rep = breakdown_report(dets((0, square, 0, 0.9)), [scene])
        assert rep.shape_AP["square"] == 1.0
        assert rep.shape_AP["slender"] == 0.0

    def test_report_schema_and_files(self, tmp_path):
        scenes = self.scenes(objects_per_scene=(1, 3))
        found = self.perfect(scenes)
        rep = breakdown_report(found, scenes, raw_detections=found)
        d = rep.to_dict()
        assert sorted(d["NR_tau"]) == [f"NR_{t}" for t in range(50, 95, 5)]
        assert d["units"] == "percent" and d["AP"] == 100.0 and d["NR"] == 100.0
        rep.save(tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text()) == d
        rep.save_pr_curves(tmp_path / "pr.csv")
        with open(tmp_path / "pr.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["class", "iou_threshold", "recall", "precision"]
        assert len(rows) == 1 + len(rep.per_class) * 10 * 101

    def test_empty_detections(self):
        scenes = self.scenes()
        rep = breakdown_report(DetectionSet.empty(), scenes, raw_detections=DetectionSet.empty())
        assert rep.AP == 0.0 and rep.NR is None
