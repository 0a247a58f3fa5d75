"""Acceptance checks; each prints one PASS/FAIL line with the measured values.

The directional experiment checks train 20 toy detectors each and take several
minutes on one CPU.
"""

import math
import time

import numpy as np
import pytest

from freeanchor.cli import main
from freeanchor.evaluation import Detection, DetectionSet, average_precision
from freeanchor.experiment import ap_gap, compare, crowded_preset, non_decreasing, slender_preset
from freeanchor.geometry import iou, iou_matrix, nms
from freeanchor.gradcheck import TOLERANCE, run_gradcheck, summarize
from freeanchor.loss import Predictions, baseline_loss, focal_term, likelihood_of_loss, mean_max, sigmoid
from freeanchor.matching import build_anchor_bags, build_iou_assignment, match_probability, saturated_linear
from freeanchor.model import prior_bias

SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def emit(name, passed, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        assert passed, detail

    return emit


def random_boxes(rng, n, hi=60.0, lo_size=2.0, hi_size=25.0):
    xy = rng.uniform(0, hi, (n, 2))
    return np.hstack([xy, xy + rng.uniform(lo_size, hi_size, (n, 2))])


def test_gradient_correctness(verdict):
    t0 = time.perf_counter()
    results = run_gradcheck(num_instances=100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(summarize(results).values())
    sizes = {(r.num_objects, r.num_classes) for r in results}
    anchors = [r.num_anchors for r in results]
    ok = worst < TOLERANCE and elapsed < 60 and len(results) >= 100
    ok &= {o for o, _ in sizes} <= {2, 3, 4} and {k for _, k in sizes} == {1, 3}
    ok &= 20 <= min(anchors) and max(anchors) <= 100
    verdict("gradient correctness", ok, f"max rel error {worst:.2e} over {len(results)} instances in {elapsed:.1f}s")


def test_mle_identity(verdict):
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        nb, A, k = int(rng.integers(1, 5)), int(rng.integers(5, 40)), [1, 3][seed % 2]
        gt = random_boxes(rng, nb, hi=40, lo_size=6, hi_size=20)
        anchors = gt[rng.integers(0, nb, A)] + rng.normal(0, 3, (A, 4))
        anchors[:, 2:] = np.maximum(anchors[:, 2:], anchors[:, :2] + 2)
        labels = rng.integers(0, k, nb)
        pred = Predictions(rng.normal(0, 2, (A, k)), rng.normal(0, 0.3, (A, 4)))
        C = build_iou_assignment(gt, anchors, 0.5)
        L = baseline_loss(pred, anchors, gt, labels, C, 0.75).total
        P = likelihood_of_loss(pred, anchors, gt, labels, C, 0.75)
        ref = math.exp(-L)
        if ref > 0:
            worst = max(worst, abs(P - ref) / ref)
        else:
            worst = max(worst, abs(P))
    verdict("MLE identity", worst < 1e-12, f"max relative deviation {worst:.2e} over 1000 instances")


def test_closed_form_values(verdict):
    vals = {
        "saturated_linear midpoint": (saturated_linear(0.75, 0.6, 0.9), 0.5),
        "mean_max({0.2, 0.8})": (mean_max([0.2, 0.8]), 0.68),
        "FL(0.5, 2)": (focal_term(0.5, 2.0), 0.25 * math.log(2)),
        "sigmoid(prior bias)": (sigmoid(prior_bias(0.02)), 0.02),
    }
    bad = {k: v for k, v in vals.items() if v[0] != v[1]}
    verdict("closed-form values", not bad, "all exact" if not bad else f"mismatch {bad}")


def test_mean_max_limits(verdict):
    rng = np.random.default_rng(0)
    const_ok = all(mean_max([c] * m) == c for c in rng.uniform(0, 0.999, 200) for m in (1, 2, 7))
    bounded = prox = 0
    for _ in range(10_000):
        X = rng.uniform(0, 1, int(rng.integers(1, 30))) ** rng.uniform(0.2, 5)
        v = mean_max(X)
        bounded += X.min() <= v <= X.max()
        S = rng.uniform(0, 0.05, int(rng.integers(1, 30)))
        prox += abs(mean_max(S) - S.mean()) <= S.max()
    ok = const_ok and bounded == 10_000 and prox == 10_000
    verdict("mean-max limits", ok, f"constant exact={const_ok}, bounded {bounded}/10000, mean-proximity {prox}/10000")


def test_saturated_linear_properties(verdict):
    failures = []
    unique_cases = 0
    for seed in range(2000):
        rng = np.random.default_rng(seed)
        obj = random_boxes(rng, 1)[0]
        preds = obj + rng.normal(0, 2.5, (15, 4))
        preds[:, 2:] = np.maximum(preds[:, 2:], preds[:, :2] + 0.5)
        t = float(rng.uniform(0.2, 0.7))
        p = match_probability(preds, obj, t)
        ious = iou_matrix([obj], preds)[0]
        order = np.argsort(ious, kind="stable")
        if np.any(np.diff(p[order]) < 0):
            failures.append((seed, "monotone"))
        if np.any(p[ious <= t] != 0):
            failures.append((seed, "zero at or below t"))
        top = ious.max()
        if top > t and np.sum(ious == top) == 1:
            unique_cases += 1
            if np.sum(p == 1.0) != 1 or p[np.argmax(ious)] != 1.0:
                failures.append((seed, "unique one"))
    ok = not failures and unique_cases > 100
    verdict("saturated-linear properties", ok, f"{len(failures)} violations over 2000 bags ({unique_cases} unique-max bags)")


def test_oracles(verdict):
    nms_ok = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        b, s = random_boxes(rng, 20, hi=40), rng.uniform(size=20)
        order = sorted(range(20), key=lambda i: (-s[i], i))
        kept = []
        for i in order:
            if all(iou(b[i], b[j]) <= 0.5 for j in kept):
                kept.append(i)
        nms_ok += nms(b, s, 0.5) == kept

    def d(*rows):
        return DetectionSet.from_list(Detection(*r) for r in rows)

    g0, g1, g2 = (0, 0, 10, 10), (20, 0, 30, 10), (40, 0, 50, 10)
    fixtures = [
        # one class, 5 detections: PR table (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2), (1, 3/5)
        (d((0, g0, 0, .9), (0, g0, 0, .8), (0, g1, 0, .7), (0, (60, 60, 70, 70), 0, .6), (0, (42, 0, 52, 10), 0, .5)),
         d((0, g0, 0, 1), (0, g1, 0, 1), (0, g2, 0, 1)), (34 + 33 * 2 / 3 + 34 * 0.6) / 101),
        # two classes over two scenes: class 0 reaches recall 1/2 at precision 1; class 1 envelope 1/2
        (d((0, g0, 0, .9), (0, g2, 1, .8), (1, g2, 1, .3)),
         d((0, g0, 0, 1), (1, g1, 0, 1), (1, g2, 1, 1)), (51 / 101 + 0.5) / 2),
        # greedy by score: the first detection takes the better-overlapping object
        (d((0, (3, 0, 13, 10), 0, .9), (0, (5, 0, 15, 10), 0, .8)),
         d((0, (0, 0, 10, 10), 0, 1), (0, (4, 0, 14, 10), 0, 1)), 51 / 101),
    ]
    ap_ok = sum(abs(average_precision(f, g, 0.5) - want) < 1e-12 for f, g, want in fixtures)

    bag_ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        objs = random_boxes(rng, int(rng.integers(1, 5)))
        anchors = np.round(random_boxes(rng, int(rng.integers(5, 80))))
        ious = iou_matrix(objs, anchors)
        bag_ok += all(
            list(bag.indices) == sorted(range(len(anchors)), key=lambda j: (-ious[bag.object_index, j], j))[:10]
            for bag in build_anchor_bags(objs, anchors, 10)
        )
    ok = nms_ok == 1000 and ap_ok == 3 and bag_ok == 100
    verdict("oracle equivalences", ok, f"NMS {nms_ok}/1000, AP fixtures {ap_ok}/3, anchor bags {bag_ok}/100")


def test_determinism(verdict, tmp_path):
    def run(*argv):
        assert main([str(a) for a in argv]) == 0

    run("generate", "--out", tmp_path / "train.jsonl", "--scenes", 30, "--seed", 2, "--objects", "1,2,3",
        "--slender-frac", 0.5)
    run("generate", "--out", tmp_path / "test.jsonl", "--scenes", 20, "--seed", 1002, "--objects", "1,2,3",
        "--slender-frac", 0.5)
    for name in ("a", "b"):
        run("train", "--data", tmp_path / "train.jsonl", "--out", tmp_path / name, "--iterations", 100,
            "--hidden", 8, "--n", 10, "--lr", 0.05, "--momentum", 0.9, "--log-every", 5)
        run("eval", "--checkpoint", tmp_path / name / "model.json", "--data", tmp_path / "test.jsonl",
            "--out", tmp_path / name / "eval", "--no-figures")
    same = {
        f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("log.csv", "model.json", "eval/report.json", "eval/pr_curves.csv")
    }
    verdict("determinism", all(same.values()), f"byte-identical {same}")


@pytest.fixture(scope="module")
def crowded_runs():
    return {seed: compare(crowded_preset(seed)) for seed in SEEDS}


@pytest.mark.slow
def test_slender_ap(verdict):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in SEEDS:
        r = compare(slender_preset(seed))
        fa, bl = r["free_anchor"].report.AP, r["baseline_iou"].report.AP
        wins += fa > bl
        rows.append(f"{100 * fa:.1f}/{100 * bl:.1f}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 4 and elapsed < 600
    verdict("slender AP (FreeAnchor > baseline)", ok,
            f"{wins}/5 seeds, AP FreeAnchor/baseline {', '.join(rows)}, {elapsed:.0f}s")


@pytest.mark.slow
def test_crowd_gap_trend(verdict, crowded_runs):
    buckets = ["1", "2-3", "4-6"]
    good, rows = 0, []
    for seed, r in crowded_runs.items():
        gap = ap_gap(r)
        vals = [gap[b] for b in buckets if b in gap]
        good += len(vals) == 3 and non_decreasing(vals)
        rows.append("/".join(f"{100 * v:+.1f}" for v in vals))
    verdict("crowd AP gap non-decreasing over 1, 2-3, 4-6", good >= 3,
            f"{good}/5 seeds, gaps {', '.join(rows)}")


@pytest.mark.slow
def test_nms_recall(verdict, crowded_runs):
    wins, rows = 0, []
    for seed, r in crowded_runs.items():
        fa, bl = r["free_anchor"].report.NR, r["baseline_iou"].report.NR
        wins += fa is not None and bl is not None and fa >= bl
        rows.append(f"{100 * fa:.1f}/{100 * bl:.1f}")
    verdict("NMS recall (FreeAnchor >= baseline)", wins >= 4, f"{wins}/5 seeds, NR {', '.join(rows)}")
