"""Likelihoods and losses for learning-to-match anchor assignment.

All probabilities are built from logits in log space. The match
probabilities P{a_j -> b_i} and P{a_j in A-} enter the losses as constant
weights: no gradient flows through the predicted boxes used to compute them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import as_boxes, encode_deltas, smooth_l1, smooth_l1_grad
from .matching import AnchorBag, MatchProbabilities

EPS = 1e-12
LOG_ONE_MINUS_EPS = float(np.log1p(-EPS))


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or inf."""

    def __init__(self, term: str):
        super().__init__(f"non-finite value in loss term '{term}'")
        self.term = term


@dataclass(frozen=True)
class HyperParams:
    n: int = 50
    t: float = 0.6
    alpha: float = 0.5
    gamma: float = 2.0
    beta: float = 0.75
    iou_threshold: float = 0.5
    lr: float = 0.01
    eps: float = EPS

    def weights(self, num_objects: int) -> tuple[float, float]:
        """(w1, w2); for an empty image w1 = 0 and w2 = (1 - alpha) / n."""
        if num_objects == 0:
            return 0.0, (1.0 - self.alpha) / self.n
        return self.alpha / num_objects, (1.0 - self.alpha) / (self.n * num_objects)


@dataclass
class Predictions:
    logits: np.ndarray  # (A, k) pre-sigmoid class scores
    deltas: np.ndarray  # (A, 4) box regression output

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)

    @property
    def num_anchors(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


@dataclass
class LossBreakdown:
    total: float
    recall: float
    background: float
    grad_logits: np.ndarray
    grad_deltas: np.ndarray
    mean_max_inputs: list[np.ndarray] = field(default_factory=list)
    term_grads: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def softplus(z):
    return np.logaddexp(0.0, z)


def log1mexp(x):
    """log(1 - exp(x)) for x <= 0, accurate on both sides of -log 2."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    near = x > -np.log(2.0)
    with np.errstate(divide="ignore"):
        out[near] = np.log(-np.expm1(x[near]))
        out[~near] = np.log1p(-np.exp(x[~near]))
    return out


def bce_with_logits(logits, labels) -> np.ndarray:
    """Per-row BCE summed over classes against one-hot ``labels`` (-1: all-zero target)."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    out = softplus(z).sum(axis=1)
    hit = labels >= 0
    out[hit] -= z[hit, labels[hit]]
    return out


def cls_confidence(probs, label: int) -> float:
    """Product over classes of p (target class) or 1 - p (others)."""
    p = np.asarray(probs, dtype=np.float64)
    onehot = np.zeros(p.shape, dtype=bool)
    onehot[label] = True
    return float(np.prod(np.where(onehot, p, 1.0 - p)))


def loc_confidence(deltas, anchor, obj, beta: float) -> float:
    target = encode_deltas(anchor, obj)[0]
    return float(np.exp(-beta * smooth_l1(deltas, target)))


def mean_max(X) -> float:
    """Weighted mean with weights 1 / (1 - x); inputs clamped to [0, 1 - eps]."""
    x = np.clip(np.asarray(X, dtype=np.float64), 0.0, 1.0 - EPS)
    if x.size == 0:
        raise ValueError("mean_max needs a non-empty set")
    w = 1.0 / (1.0 - x)
    # clamp to [min, max] so round-off cannot leave the hull (constant sets stay exact)
    return float(np.clip(np.sum(w * x) / np.sum(w), x.min(), x.max()))


def log_mean_max(log_x: np.ndarray) -> tuple[float, np.ndarray]:
    """log Mean-max(exp(log_x)) and its gradient w.r.t. ``log_x``.

    Entries are clamped to at most log(1 - eps); clamped entries get zero
    gradient.
    """
    clamped = log_x > LOG_ONE_MINUS_EPS
    lx = np.where(clamped, LOG_ONE_MINUS_EPS, log_x)
    l1m = log1mexp(lx)
    log_u = np.logaddexp.reduce(lx - l1m)
    log_v = np.logaddexp.reduce(-l1m)
    base = lx - 2.0 * l1m
    grad = np.exp(base - log_u) - np.exp(base - log_v)
    grad[clamped] = 0.0
    return float(log_u - log_v), grad


def focal_term(x, gamma: float):
    """-x^gamma log(1 - x); x clamped to 1 - eps."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0 - EPS)
    out = -(x ** gamma) * np.log1p(-x)
    return out if out.ndim else float(out)


def _focal_from_log1m(y: np.ndarray, log1m_y: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """FL(y) and dFL/dy given an accurate log(1 - y)."""
    value = -(y ** gamma) * log1m_y
    pos = y > 0
    lead = np.zeros_like(y)
    if gamma != 0:
        lead[pos] = gamma * y[pos] ** (gamma - 1.0) * (-log1m_y[pos])
    grad = lead + (y ** gamma) * np.exp(-log1m_y)
    return value, grad


def _targets(anchors: np.ndarray, gt_boxes: np.ndarray, idx: np.ndarray, obj: int) -> np.ndarray:
    return encode_deltas(anchors[idx], np.broadcast_to(gt_boxes[obj], (idx.size, 4)))


def _bag_log_confidence(pred: Predictions, anchors, gt_boxes, gt_labels, bag: AnchorBag, beta: float):
    """log(P^cls * P^loc) over a bag, plus pieces needed for its gradient."""
    idx = bag.indices
    z = pred.logits[idx]
    label = int(gt_labels[bag.object_index])
    log_cls = -(softplus(z).sum(axis=1) - z[:, label])
    tgt = _targets(anchors, gt_boxes, idx, bag.object_index)
    d = pred.deltas[idx]
    sl1 = smooth_l1(d, tgt)
    return log_cls - beta * sl1, label, d, tgt


def free_anchor_loss(
    pred: Predictions,
    anchors,
    gt_boxes,
    gt_labels,
    bags: list[AnchorBag],
    match: MatchProbabilities,
    hp: HyperParams,
) -> LossBreakdown:
    """Mean-max recall term plus focal background term, with gradients."""
    anchors = as_boxes(anchors)
    gt_boxes = as_boxes(gt_boxes)
    A, k = pred.logits.shape
    w1, w2 = hp.weights(len(bags))

    g_logits_r = np.zeros((A, k))
    g_deltas_r = np.zeros((A, 4))
    recall = 0.0
    inputs = []
    if w1 > 0:
        for bag in bags:
            log_x, label, d, tgt = _bag_log_confidence(pred, anchors, gt_boxes, gt_labels, bag, hp.beta)
            inputs.append(np.exp(log_x))
            lmm, g = log_mean_max(log_x)
            recall -= w1 * lmm
            coef = -w1 * g  # dL / d log x_j
            idx = bag.indices
            # d log x / dz = onehot - sigmoid(z)
            dz = -sigmoid(pred.logits[idx])
            dz[:, label] += 1.0
            np.add.at(g_logits_r, idx, coef[:, None] * dz)
            np.add.at(g_deltas_r, idx, coef[:, None] * (-hp.beta) * smooth_l1_grad(d, tgt))
    if not np.isfinite(recall):
        raise NonFiniteLossError("recall")

    z = pred.logits
    s = softplus(z).sum(axis=1)  # -log P^bg
    pi = np.asarray(match.background, dtype=np.float64)
    y = pi * -np.expm1(-s)
    with np.errstate(divide="ignore"):
        log1m_y = np.logaddexp(np.log1p(-pi), np.log(pi) - s)
    clamped = log1m_y < np.log(hp.eps)
    y = np.where(clamped, 1.0 - hp.eps, y)
    log1m_y = np.where(clamped, np.log(hp.eps), log1m_y)
    fl, dfl = _focal_from_log1m(y, log1m_y, hp.gamma)
    background = float(w2 * fl.sum())
    if not np.isfinite(background):
        raise NonFiniteLossError("background")
    # dy/dz_c = pi * P^bg * sigmoid(z_c)
    dy = (pi * np.exp(-s))[:, None] * sigmoid(z)
    dy[clamped] = 0.0
    g_logits_b = (w2 * dfl)[:, None] * dy
    g_deltas_b = np.zeros((A, 4))

    return LossBreakdown(
        total=recall + background,
        recall=recall,
        background=background,
        grad_logits=g_logits_r + g_logits_b,
        grad_deltas=g_deltas_r + g_deltas_b,
        mean_max_inputs=inputs,
        term_grads={"recall": (g_logits_r, g_deltas_r), "background": (g_logits_b, g_deltas_b)},
    )


def loss_gradients(breakdown: LossBreakdown) -> tuple[np.ndarray, np.ndarray]:
    """Gradient tables (d/d logits, d/d deltas) of an evaluated loss."""
    return breakdown.grad_logits, breakdown.grad_deltas


def baseline_loss(
    pred: Predictions,
    anchors,
    gt_boxes,
    gt_labels,
    C: np.ndarray,
    beta: float,
    normalizer: float = 1.0,
) -> LossBreakdown:
    """Hand-crafted assignment loss: BCE + beta * SmoothL1 on A+, BCE-to-zero on A-.

    ``normalizer`` divides every term; 1 gives the plain sum.
    """
    anchors = as_boxes(anchors)
    gt_boxes = as_boxes(gt_boxes)
    A, k = pred.logits.shape
    z = pred.logits
    p = sigmoid(z)
    C = np.asarray(C)
    matched = C.sum(axis=0) > 0 if C.size else np.zeros(A, dtype=bool)
    pos = np.nonzero(matched)[0]
    neg = np.nonzero(~matched)[0]

    g_logits_p = np.zeros((A, k))
    g_deltas_p = np.zeros((A, 4))
    positive = 0.0
    if pos.size:
        obj = np.argmax(C[:, pos], axis=0)
        labels = np.asarray(gt_labels)[obj]
        positive += bce_with_logits(z[pos], labels).sum()
        tgt = encode_deltas(anchors[pos], gt_boxes[obj])
        positive += beta * smooth_l1(pred.deltas[pos], tgt).sum()
        dz = p[pos].copy()
        dz[np.arange(pos.size), labels] -= 1.0
        g_logits_p[pos] = dz / normalizer
        g_deltas_p[pos] = beta * smooth_l1_grad(pred.deltas[pos], tgt) / normalizer
    positive /= normalizer

    g_logits_b = np.zeros((A, k))
    background = float(softplus(z[neg]).sum() / normalizer)
    g_logits_b[neg] = p[neg] / normalizer
    if not np.isfinite(positive + background):
        raise NonFiniteLossError("baseline")
    return LossBreakdown(
        total=float(positive + background),
        recall=float(positive),
        background=background,
        grad_logits=g_logits_p + g_logits_b,
        grad_deltas=g_deltas_p,
        term_grads={"recall": (g_logits_p, g_deltas_p), "background": (g_logits_b, np.zeros((A, 4)))},
    )


def likelihood_of_loss(pred: Predictions, anchors, gt_boxes, gt_labels, C: np.ndarray, beta: float) -> float:
    """Product-form likelihood of the hand-crafted assignment (e^{-loss})."""
    anchors = as_boxes(anchors)
    gt_boxes = as_boxes(gt_boxes)
    p = sigmoid(pred.logits)
    q = sigmoid(-pred.logits)  # 1 - p without cancellation
    C = np.asarray(C)
    P = 1.0
    for j in range(pred.num_anchors):
        col = C[:, j] if C.size else np.zeros(0)
        if col.sum() == 0:
            P *= float(np.prod(q[j]))
            continue
        p_cls = 0.0
        p_loc = 0.0
        for i in np.nonzero(col)[0]:
            c = int(gt_labels[i])
            p_cls += float(np.prod(np.where(np.arange(p.shape[1]) == c, p[j], q[j])))
            tgt = encode_deltas(anchors[j], gt_boxes[i])[0]
            p_loc += float(np.exp(-beta * smooth_l1(pred.deltas[j], tgt)))
        P *= p_cls * p_loc
    return P


def _bag_confidences(pred: Predictions, anchors, gt_boxes, gt_labels, bag: AnchorBag, beta: float) -> np.ndarray:
    p = sigmoid(pred.logits)
    q = sigmoid(-pred.logits)
    label = int(gt_labels[bag.object_index])
    out = []
    for j in bag.indices:
        p_cls = float(np.prod(np.where(np.arange(p.shape[1]) == label, p[j], q[j])))
        tgt = encode_deltas(anchors[j], gt_boxes[bag.object_index])[0]
        out.append(p_cls * float(np.exp(-beta * smooth_l1(pred.deltas[j], tgt))))
    return np.asarray(out)


def recall_likelihood(pred: Predictions, anchors, gt_boxes, gt_labels, bags: list[AnchorBag], beta: float) -> float:
    """Product over objects of the best bag confidence."""
    anchors = as_boxes(anchors)
    gt_boxes = as_boxes(gt_boxes)
    P = 1.0
    for bag in bags:
        P *= float(np.max(_bag_confidences(pred, anchors, gt_boxes, gt_labels, bag, beta)))
    return P


def precision_likelihood(pred: Predictions, match: MatchProbabilities) -> float:
    """Product over anchors of 1 - P{a_j in A-} (1 - P^bg_j)."""
    p_bg = np.prod(sigmoid(-pred.logits), axis=1)
    return float(np.prod(1.0 - match.background * (1.0 - p_bg)))


def customized_likelihood(pred, anchors, gt_boxes, gt_labels, bags, match, beta: float) -> float:
    return recall_likelihood(pred, anchors, gt_boxes, gt_labels, bags, beta) * precision_likelihood(pred, match)


def customized_loss_max(pred, anchors, gt_boxes, gt_labels, bags, match, beta: float) -> float:
    """-log of the customized likelihood with the hard max, evaluated in log space."""
    anchors = as_boxes(anchors)
    gt_boxes = as_boxes(gt_boxes)
    total = 0.0
    for bag in bags:
        log_x = _bag_log_confidence(pred, anchors, gt_boxes, gt_labels, bag, beta)[0]
        total -= float(np.max(log_x))
    s = softplus(pred.logits).sum(axis=1)
    pi = np.asarray(match.background, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log1m_y = np.logaddexp(np.log1p(-pi), np.log(pi) - s)
    return total - float(log1m_y.sum())
