"""Training loop: forward, bag construction, loss, backward, SGD update."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import AnchorLayout, decode_deltas, generate_anchors, iou_matrix
from .inference import DECODE_CLIP
from .loss import HyperParams, LossBreakdown, NonFiniteLossError, baseline_loss, free_anchor_loss
from .matching import build_anchor_bags, build_iou_assignment, compute_match_probabilities
from .model import (
    IntegralImages,
    ModelParams,
    TrainingError,
    backward,
    extract_features,
    feature_dim,
    forward,
    init_params,
    save_checkpoint,
    sgd_step,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("free_anchor", "baseline_iou")
LOG_HEADER = ["iteration", "lr", "loss", "recall_term", "background_term", "grad_norm_recall", "grad_norm_background"]

DEFAULT_LAYOUT = AnchorLayout(
    strides=(8,),
    scales=((20.0, 28.0),),
    ratios=(0.5, 1.0, 2.0),
    width=64,
    height=64,
)


@dataclass
class TrainConfig:
    loss: str = "free_anchor"
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    milestones: tuple[int, ...] = (1200, 1600)
    momentum: float = 0.0
    hidden: tuple[int, ...] = (32,)
    rho: float = 0.02
    seed: int = 0
    log_every: int = 10
    snapshot_every: int = 0
    hp: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        self.milestones = tuple(int(m) for m in self.milestones)
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.hp, dict):
            self.hp = HyperParams(**self.hp)

    def lr_at(self, iteration: int) -> float:
        return self.lr * 0.1 ** sum(1 for m in self.milestones if iteration >= m)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["hidden"] = list(self.hidden)
        return d


class SceneCache:
    """Per-scene features, anchor bags and IoU assignments for a fixed anchor set."""

    def __init__(self, anchors: np.ndarray, n: int, iou_threshold: float, keep_features: bool = True):
        self.anchors = anchors
        self.n = n
        self.iou_threshold = iou_threshold
        self.keep_features = keep_features
        self._features: dict[int, np.ndarray] = {}
        self._targets: dict[int, tuple] = {}

    def features(self, scene) -> np.ndarray:
        f = self._features.get(scene.id)
        if f is None:
            f = extract_features(IntegralImages.from_raster(scene.raster), self.anchors)
            if self.keep_features:
                self._features[scene.id] = f
        return f

    __call__ = features

    def targets(self, scene):
        t = self._targets.get(scene.id)
        if t is None:
            ious = iou_matrix(scene.boxes, self.anchors)
            bags = build_anchor_bags(scene.boxes, self.anchors, self.n, ious) if scene.crowdedness else []
            C = build_iou_assignment(scene.boxes, self.anchors, self.iou_threshold, ious)
            t = (bags, C)
            self._targets[scene.id] = t
        return t


def scene_loss(pred, scene, cache: SceneCache, config: TrainConfig) -> LossBreakdown:
    """Loss and prediction gradients for one scene under the configured objective."""
    bags, C = cache.targets(scene)
    hp = config.hp
    if config.loss == "free_anchor":
        pred_boxes = decode_deltas(cache.anchors, pred.deltas, clip_log=DECODE_CLIP)
        match = compute_match_probabilities(bags, scene.boxes, pred_boxes, len(cache.anchors), hp.t)
        return free_anchor_loss(pred, cache.anchors, scene.boxes, scene.labels, bags, match, hp)
    normalizer = max(1.0, float(C.sum()))
    return baseline_loss(pred, cache.anchors, scene.boxes, scene.labels, C, hp.beta, normalizer)


@dataclass
class TrainState:
    params: ModelParams
    iteration: int = 0
    velocity: np.ndarray | None = None
    rows: list[list] = field(default_factory=list)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def format_log_row(row) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _log_lines_before(path: Path, iteration: int) -> list[str]:
    """Data lines of an existing log with iteration < ``iteration`` (a resume rewrites the rest)."""
    with open(path, newline="") as fh:
        lines = fh.readlines()[1:]
    return [ln for ln in lines if ln.strip() and int(ln.split(",", 1)[0]) < iteration]


def batch_indices(seed: int, iteration: int, num_scenes: int, batch_size: int) -> np.ndarray:
    """Mini-batch for one iteration; depends only on (seed, iteration), so resumes replay exactly."""
    rng = np.random.default_rng([seed, iteration])
    return rng.choice(num_scenes, size=batch_size, replace=batch_size > num_scenes)


def train(
    scenes,
    config: TrainConfig,
    anchors: np.ndarray | None = None,
    state: TrainState | None = None,
    cache: SceneCache | None = None,
    log_path=None,
    checkpoint_dir=None,
    on_step: Callable[[TrainState], None] | None = None,
    num_classes: int | None = None,
    checkpoint_meta: dict | None = None,
) -> TrainState:
    """Run SGD on the chosen objective from ``state`` (or a fresh init) up to ``config.iterations``."""
    if anchors is None:
        anchors = generate_anchors(DEFAULT_LAYOUT)
    if not scenes:
        raise ValueError("training needs at least one scene")
    k = num_classes
    if k is None:
        k = max((int(s.labels.max()) + 1 for s in scenes if s.crowdedness), default=1)
    if cache is None:
        cache = SceneCache(anchors, config.hp.n, config.hp.iou_threshold)
    if state is None:
        state = TrainState(init_params(feature_dim(), k, config.rho, config.seed, config.hidden))
    A = len(anchors)
    meta = checkpoint_meta or {}
    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = state.iteration == 0 or not log_path.exists()
        kept = [] if fresh else _log_lines_before(log_path, state.iteration)
        log_fh = open(log_path, "w", newline="")
        log_fh.write(format_log_row(LOG_HEADER))
        log_fh.writelines(kept)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    try:
        while state.iteration < config.iterations:
            it = state.iteration
            idx = batch_indices(config.seed, it, len(scenes), config.batch_size)
            batch = [scenes[i] for i in idx]
            feats = np.concatenate([cache.features(s) for s in batch], axis=0)
            pred = forward(state.params, feats)
            B = len(batch)
            total = recall = background = 0.0
            g_logits = np.zeros_like(pred.logits)
            g_deltas = np.zeros_like(pred.deltas)
            g_terms = {name: (np.zeros_like(pred.logits), np.zeros_like(pred.deltas)) for name in ("recall", "background")}
            try:
                for b, scene in enumerate(batch):
                    sl = slice(b * A, (b + 1) * A)
                    sub = type(pred)(pred.logits[sl], pred.deltas[sl])
                    lb = scene_loss(sub, scene, cache, config)
                    total += lb.total / B
                    recall += lb.recall / B
                    background += lb.background / B
                    g_logits[sl] = lb.grad_logits / B
                    g_deltas[sl] = lb.grad_deltas / B
                    for name, (gl, gd) in lb.term_grads.items():
                        g_terms[name][0][sl] = gl / B
                        g_terms[name][1][sl] = gd / B
                if not np.isfinite(total):
                    raise NonFiniteLossError("total")
                grads = backward(state.params, feats, g_logits, g_deltas)
                lr = config.lr_at(it)
                new_params, velocity = sgd_step(state.params, grads, lr, config.momentum, state.velocity)
            except (NonFiniteLossError, TrainingError, FloatingPointError) as exc:
                if ckpt_dir is not None:
                    save_checkpoint(
                        ckpt_dir / "last_good.json",
                        state.params,
                        iteration=it,
                        velocity=state.velocity if state.velocity is not None else [],
                        train_config=config.to_dict(),
                        **meta,
                    )
                raise TrainingError(f"iteration {it}: {exc}; last good parameters kept") from exc
            if it % config.log_every == 0 or it == config.iterations - 1:
                norms = [
                    float(np.linalg.norm(backward(state.params, feats, *g_terms[name]).flat()))
                    for name in ("recall", "background")
                ]
                row = [it, lr, total, recall, background, *norms]
                state.rows.append(row)
                if log_fh is not None:
                    log_fh.write(format_log_row(row))
            state.params = new_params
            state.velocity = velocity
            state.iteration = it + 1
            if ckpt_dir is not None and config.snapshot_every and state.iteration % config.snapshot_every == 0:
                save_checkpoint(
                    ckpt_dir / f"ckpt_{state.iteration:06d}.json",
                    state.params,
                    iteration=state.iteration,
                    velocity=state.velocity if state.velocity is not None else [],
                    train_config=config.to_dict(),
                    **meta,
                )
            if on_step is not None:
                on_step(state)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state
