"""Finite-difference verification of the full loss-through-head gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import decode_deltas
from .inference import DECODE_CLIP
from .loss import HyperParams, baseline_loss, free_anchor_loss
from .matching import build_anchor_bags, build_iou_assignment, compute_match_probabilities
from .model import ModelParams, backward, forward, init_params

TOLERANCE = 1e-5


@dataclass
class Instance:
    anchors: np.ndarray
    gt_boxes: np.ndarray
    gt_labels: np.ndarray
    features: np.ndarray
    params: ModelParams


def random_instance(
    seed: int,
    num_objects: tuple[int, int] = (2, 4),
    num_anchors: tuple[int, int] = (20, 100),
    classes: tuple[int, ...] = (1, 3),
    feature_dim: int = 8,
    hidden: tuple[int, ...] = (6,),
) -> Instance:
    """Objects with jittered anchors around them, random features and perturbed head weights."""
    rng = np.random.default_rng(seed)
    nb = int(rng.integers(num_objects[0], num_objects[1] + 1))
    A = int(rng.integers(num_anchors[0], num_anchors[1] + 1))
    k = int(classes[seed % len(classes)])
    ctr = rng.uniform(10, 50, (nb, 2))
    wh = rng.uniform(6, 20, (nb, 2))
    gt = np.concatenate([ctr - wh / 2, ctr + wh / 2], axis=1)
    labels = rng.integers(0, k, nb)
    anchors = gt[rng.integers(0, nb, A)] + rng.normal(0, 3, (A, 4))
    anchors[:, 2:] = np.maximum(anchors[:, 2:], anchors[:, :2] + 2)
    feats = rng.normal(size=(A, feature_dim))
    p = init_params(feature_dim, k, seed=seed, hidden=hidden)
    p = p.with_flat(p.flat() + rng.normal(0, 0.3, p.flat().size))
    return Instance(anchors, gt, labels, feats, p)


def _block_names(params: ModelParams) -> list[str]:
    names = []
    for i in range(len(params.weights)):
        names += [f"W{i + 1}", f"b{i + 1}"]
    return names


@dataclass
class CheckResult:
    seed: int
    num_anchors: int
    num_objects: int
    num_classes: int
    block_errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values())


def check_instance(
    inst: Instance,
    hp: HyperParams,
    loss: str = "free_anchor",
    step: float = 1e-6,
    corrupt: float = 0.0,
    seed: int = 0,
) -> CheckResult:
    """Compare backward() against central differences of the scalar loss in every parameter.

    Match probabilities are computed once at the base point and held fixed, so the
    difference quotient perturbs only the differentiable paths.
    """
    p, A = inst.params, len(inst.anchors)
    pred = forward(p, inst.features)
    if loss == "free_anchor":
        bags = build_anchor_bags(inst.gt_boxes, inst.anchors, hp.n)
        boxes = decode_deltas(inst.anchors, pred.deltas, clip_log=DECODE_CLIP)
        match = compute_match_probabilities(bags, inst.gt_boxes, boxes, A, hp.t)

        def evaluate(pr):
            return free_anchor_loss(pr, inst.anchors, inst.gt_boxes, inst.gt_labels, bags, match, hp)
    elif loss == "baseline_iou":
        C = build_iou_assignment(inst.gt_boxes, inst.anchors, hp.iou_threshold)

        def evaluate(pr):
            return baseline_loss(pr, inst.anchors, inst.gt_boxes, inst.gt_labels, C, hp.beta)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    lb = evaluate(pred)
    analytic = backward(p, inst.features, lb.grad_logits, lb.grad_deltas).flat()
    if corrupt:
        analytic = analytic.copy()
        analytic[np.argmax(np.abs(analytic))] *= 1.0 + corrupt
    x = p.flat()
    numeric = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        hi = evaluate(forward(p.with_flat(x + e), inst.features)).total
        lo = evaluate(forward(p.with_flat(x - e), inst.features)).total
        numeric[i] = (hi - lo) / (2 * step)

    res = CheckResult(seed, A, len(inst.gt_boxes), int(p.num_classes))
    start = 0
    for name, arr in zip(_block_names(p), p.arrays()):
        sl = slice(start, start + arr.size)
        start += arr.size
        scale = max(np.abs(analytic[sl]).max(), np.abs(numeric[sl]).max(), 1e-12)
        res.block_errors[name] = float(np.abs(analytic[sl] - numeric[sl]).max() / scale)
    return res


def run_gradcheck(
    num_instances: int = 100,
    seed: int = 0,
    hp: HyperParams | None = None,
    loss: str = "free_anchor",
    step: float = 1e-6,
    corrupt: float = 0.0,
) -> list[CheckResult]:
    # small bags and a low t so several anchors carry nonzero match probability
    hp = hp or HyperParams(n=10, t=0.3)
    return [
        check_instance(random_instance(seed + i), hp, loss, step, corrupt, seed + i)
        for i in range(num_instances)
    ]


def summarize(results: list[CheckResult], tol: float = TOLERANCE) -> dict[str, float]:
    """Worst relative error per parameter block across instances."""
    out: dict[str, float] = {}
    for r in results:
        for name, err in r.block_errors.items():
            out[name] = max(out.get(name, 0.0), err)
    return out
