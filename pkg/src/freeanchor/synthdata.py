"""Deterministic synthetic detection scenes: square, slender and crowded layouts."""

from __future__ import annotations

import base64
import binascii
import gzip
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import aspect_ratio, iou_matrix

log = logging.getLogger(__name__)

SHAPE_KINDS = ("square", "slender_h", "slender_v")
MAX_CLASSES = 4


class DatasetFormatError(ValueError):
    pass


@dataclass
class Scene:
    id: int
    width: int
    height: int
    raster: np.ndarray  # (H, W) uint8
    boxes: np.ndarray  # (N, 4) float64
    labels: np.ndarray  # (N,) int64

    @property
    def crowdedness(self) -> int:
        return int(self.boxes.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.raster, other.raster)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class DatasetSpec:
    num_scenes: int = 100
    width: int = 64
    height: int = 64
    num_classes: int = 3
    # fractions of square / slender-horizontal / slender-vertical objects
    shape_mix: tuple[float, float, float] = (1.0, 0.0, 0.0)
    # objects per scene drawn uniformly from this list
    objects_per_scene: tuple[int, ...] = (1,)
    square_size: tuple[int, int] = (16, 32)
    square_aspect: tuple[float, float] = (1.0, 1.4)
    slender_long: tuple[int, int] = (24, 48)
    slender_aspect: tuple[float, float] = (3.0, 6.0)
    contrast: float = 0.6
    noise: float = 0.05
    max_gt_iou: float = 0.7
    max_tries: int = 100
    seed: int = 0

    def __post_init__(self):
        self.shape_mix = tuple(float(x) for x in self.shape_mix)
        self.objects_per_scene = tuple(int(x) for x in self.objects_per_scene)
        if len(self.shape_mix) != 3 or abs(sum(self.shape_mix) - 1.0) > 1e-9 or min(self.shape_mix) < 0:
            raise ValueError(f"shape_mix must be three non-negative fractions summing to 1, got {self.shape_mix}")
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise ValueError(f"num_classes must be in 1..{MAX_CLASSES}")
        if not self.objects_per_scene or min(self.objects_per_scene) < 0:
            raise ValueError("objects_per_scene must list non-negative counts")
        if self.slender_aspect[0] < 3.0:
            raise ValueError("slender aspect ratios must be at least 3")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _pattern(label: int, h: int, w: int, contrast: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if label == 0:
        mask = np.ones((h, w), dtype=bool)
    elif label == 1:
        mask = xx % 2 == 0
    elif label == 2:
        mask = yy % 2 == 0
    else:
        mask = (xx + yy) % 2 == 0
    return np.where(mask, 1.0, contrast)


def _sample_size(rng: np.random.Generator, kind: str, spec: DatasetSpec) -> tuple[int, int]:
    if kind == "square":
        side = int(rng.integers(spec.square_size[0], spec.square_size[1] + 1))
        ar = rng.uniform(*spec.square_aspect)
        other = max(2, int(round(side / ar)))
        return (side, other) if rng.random() < 0.5 else (other, side)
    long_side = int(rng.integers(spec.slender_long[0], spec.slender_long[1] + 1))
    ar = rng.uniform(*spec.slender_aspect)
    short = max(2, int(np.floor(long_side / ar)))
    return (long_side, short) if kind == "slender_h" else (short, long_side)


def generate_scene(spec: DatasetSpec, scene_id: int) -> Scene:
    rng = np.random.default_rng([spec.seed, scene_id])
    count = int(rng.choice(spec.objects_per_scene))
    img = np.zeros((spec.height, spec.width))
    boxes, labels = [], []
    for _ in range(count):
        kind = SHAPE_KINDS[int(rng.choice(3, p=spec.shape_mix))]
        label = int(rng.integers(spec.num_classes))
        placed = None
        for _ in range(spec.max_tries):
            w, h = _sample_size(rng, kind, spec)
            w, h = min(w, spec.width), min(h, spec.height)
            x1 = int(rng.integers(0, spec.width - w + 1))
            y1 = int(rng.integers(0, spec.height - h + 1))
            cand = np.array([[x1, y1, x1 + w, y1 + h]], dtype=np.float64)
            if boxes and iou_matrix(cand, np.asarray(boxes)).max() > spec.max_gt_iou:
                continue
            placed = cand[0]
            break
        if placed is None:
            log.warning("scene %d: could not place a %s object after %d tries; skipped", scene_id, kind, spec.max_tries)
            continue
        x1, y1, x2, y2 = (int(v) for v in placed)
        img[y1:y2, x1:x2] = _pattern(label, y2 - y1, x2 - x1, spec.contrast)
        boxes.append(placed)
        labels.append(label)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    raster = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return Scene(
        id=scene_id,
        width=spec.width,
        height=spec.height,
        raster=raster,
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
    )


def generate_dataset(spec: DatasetSpec) -> list[Scene]:
    """One scene per index with sub-seed (seed, index); a pure function of ``spec``."""
    return [generate_scene(spec, i) for i in range(spec.num_scenes)]


def is_slender(boxes, threshold: float = 3.0) -> np.ndarray:
    return aspect_ratio(boxes) >= threshold


def shape_composition(scenes: list[Scene]) -> dict:
    n = sum(s.crowdedness for s in scenes)
    slender = sum(int(is_slender(s.boxes).sum()) for s in scenes if s.crowdedness)
    return {"objects": n, "slender": slender, "square": n - slender}


# ---------------------------------------------------------------------------
# JSON-lines IO


def scene_to_json(scene: Scene) -> str:
    objects = [
        {"x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3]), "class": int(c)}
        for b, c in zip(scene.boxes, scene.labels)
    ]
    doc = {
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "objects": objects,
        "raster": base64.b64encode(np.ascontiguousarray(scene.raster, dtype=np.uint8).tobytes()).decode("ascii"),
    }
    return json.dumps(doc)


def scene_from_json(line: str, lineno: int = 0) -> Scene:
    try:
        doc = json.loads(line)
        sid = int(doc["id"])
        width, height = int(doc["width"]), int(doc["height"])
        objects = doc["objects"]
        encoded = doc["raster"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: malformed scene record ({exc})") from exc
    try:
        data = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: scene {sid}: cannot decode raster ({exc})") from exc
    if len(data) != width * height:
        raise DatasetFormatError(
            f"line {lineno}: scene {sid}: raster has {len(data)} bytes, expected {width * height}"
        )
    boxes = np.array([[o["x1"], o["y1"], o["x2"], o["y2"]] for o in objects], dtype=np.float64).reshape(-1, 4)
    labels = np.array([o["class"] for o in objects], dtype=np.int64)
    raster = np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()
    return Scene(sid, width, height, raster, boxes, labels)


def _open_read(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def save_dataset(scenes: list[Scene], path) -> None:
    path = Path(path)
    with open(path, "wb") as raw:
        if path.suffix == ".gz":
            # empty name and mtime=0 keep gzip output byte-identical across runs and paths
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                _write_lines(scenes, gz)
        else:
            _write_lines(scenes, raw)


def _write_lines(scenes, fh) -> None:
    for scene in scenes:
        fh.write(scene_to_json(scene).encode("utf-8"))
        fh.write(b"\n")


def load_dataset(path) -> list[Scene]:
    path = Path(path)
    scenes = []
    with _open_read(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            scenes.append(scene_from_json(line, lineno))
    return scenes
