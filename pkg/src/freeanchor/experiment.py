"""Serializable experiment configs and the paired FreeAnchor-vs-baseline comparison runs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import EvalReport, breakdown_report
from .geometry import AnchorLayout, generate_anchors
from .inference import detect_all
from .loss import HyperParams
from .model import ModelParams
from .synthdata import DatasetSpec, Scene, generate_dataset, load_dataset
from .trainer import DEFAULT_LAYOUT, LOSS_MODES, SceneCache, TrainConfig, TrainState, train

# test sets use seed + TEST_SEED_OFFSET so they never share scenes with training
TEST_SEED_OFFSET = 1000


@dataclass
class ExperimentConfig:
    """Everything needed to re-run one training + evaluation; round-trips through JSON."""

    dataset: DatasetSpec | str = field(default_factory=DatasetSpec)
    test_dataset: DatasetSpec | str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    layout: AnchorLayout = DEFAULT_LAYOUT
    output_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec.from_dict(self.dataset)
        if isinstance(self.test_dataset, dict):
            self.test_dataset = DatasetSpec.from_dict(self.test_dataset)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.layout, dict):
            self.layout = AnchorLayout.from_dict(self.layout)

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def loss(self) -> str:
        return self.train.loss

    def to_dict(self) -> dict:
        def ds(v):
            return v.to_dict() if isinstance(v, DatasetSpec) else v

        return {
            "dataset": ds(self.dataset),
            "test_dataset": ds(self.test_dataset),
            "train": self.train.to_dict(),
            "layout": self.layout.to_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_loss(self, loss: str) -> "ExperimentConfig":
        d = self.to_dict()
        d["train"]["loss"] = loss
        return ExperimentConfig.from_dict(d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment under another seed; generated datasets are reseeded too."""
        d = self.to_dict()
        d["train"]["seed"] = seed
        if isinstance(d["dataset"], dict):
            d["dataset"]["seed"] = seed
        if isinstance(d["test_dataset"], dict):
            d["test_dataset"]["seed"] = seed + TEST_SEED_OFFSET
        return ExperimentConfig.from_dict(d)


def resolve_dataset(spec: DatasetSpec | str) -> list[Scene]:
    if isinstance(spec, DatasetSpec):
        return generate_dataset(spec)
    return load_dataset(spec)


@dataclass
class RunResult:
    config: ExperimentConfig
    state: TrainState
    report: EvalReport

    @property
    def params(self) -> ModelParams:
        return self.state.params


def run_experiment(config: ExperimentConfig, train_scenes=None, test_scenes=None) -> RunResult:
    """Train per ``config.train`` and evaluate on the test set (or the training set if none)."""
    train_scenes = train_scenes if train_scenes is not None else resolve_dataset(config.dataset)
    if test_scenes is None:
        test_scenes = resolve_dataset(config.test_dataset) if config.test_dataset is not None else train_scenes
    anchors = generate_anchors(config.layout)
    num_classes = config.dataset.num_classes if isinstance(config.dataset, DatasetSpec) else None
    cache = SceneCache(anchors, config.train.hp.n, config.train.hp.iou_threshold)
    state = train(train_scenes, config.train, anchors, cache=cache, num_classes=num_classes)
    test_cache = cache if test_scenes is train_scenes else SceneCache(anchors, 1, 0.5)
    raw, final = detect_all(state.params, test_scenes, anchors, feature_cache=test_cache.features)
    report = breakdown_report(final, test_scenes, raw_detections=raw)
    return RunResult(config, state, report)


def compare(config: ExperimentConfig, modes=LOSS_MODES) -> dict[str, RunResult]:
    """Train each loss mode on identical data, init seed and schedule."""
    train_scenes = resolve_dataset(config.dataset)
    test_scenes = resolve_dataset(config.test_dataset) if config.test_dataset is not None else train_scenes
    return {m: run_experiment(config.with_loss(m), train_scenes, test_scenes) for m in modes}


# ---------------------------------------------------------------------------
# desk-scale presets

# schedule and head shared by all presets
PRESET_TRAIN = dict(
    iterations=2000,
    batch_size=8,
    lr=0.05,
    momentum=0.9,
    milestones=(1200, 1600),
    hidden=(32,),
    log_every=50,
    hp=HyperParams(n=10),
)


def _preset(train_spec: DatasetSpec, test_spec: DatasetSpec, seed: int) -> ExperimentConfig:
    return ExperimentConfig(dataset=train_spec, test_dataset=test_spec, train=TrainConfig(seed=seed, **PRESET_TRAIN))


def slender_preset(seed: int = 0) -> ExperimentConfig:
    """All-slender objects, one per scene: 500 training and 200 test scenes."""
    kw = dict(shape_mix=(0.0, 0.5, 0.5), objects_per_scene=(1,))
    return _preset(
        DatasetSpec(num_scenes=500, seed=seed, **kw),
        DatasetSpec(num_scenes=200, seed=seed + TEST_SEED_OFFSET, **kw),
        seed,
    )


def crowded_preset(seed: int = 0) -> ExperimentConfig:
    """Mixed square/slender objects, 1 to 6 per scene: 500 training and 300 test scenes."""
    kw = dict(shape_mix=(1 / 3, 1 / 3, 1 / 3), objects_per_scene=(1, 2, 3, 4, 5, 6))
    return _preset(
        DatasetSpec(num_scenes=500, seed=seed, **kw),
        DatasetSpec(num_scenes=300, seed=seed + TEST_SEED_OFFSET, **kw),
        seed,
    )


PRESETS = {"slender": slender_preset, "crowded": crowded_preset}


def ap_gap(results: dict[str, RunResult]) -> dict[str, float]:
    """FreeAnchor minus baseline AP per crowdedness bucket (fractions, not percent)."""
    fa, bl = results["free_anchor"].report.crowd_AP, results["baseline_iou"].report.crowd_AP
    return {b: fa[b] - bl[b] for b in fa if b in bl}


def non_decreasing(values) -> bool:
    v = np.asarray(list(values), dtype=float)
    return bool(np.all(np.diff(v) >= 0))
