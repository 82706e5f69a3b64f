"""Seeded synthetic multi-person scenes with controllable occlusion.

Persons are grayscale stick figures (head disc plus four limbs).  Placement is
rejection-sampled until every person's maximum box IoU with another person
falls in the configured range; persons drawn later cover earlier ones, so
occlusion is in the pixels while every keypoint stays labeled.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .types import (SYNTH_SKELETON, KeypointSet, PersonAnnotation, Scene, SkeletonSpec, iou_matrix,
                    person_from_record, person_to_record)

# template offsets in units of person height: head, left/right hand, left/right foot
_TEMPLATE = np.array([[0.0, -0.40], [-0.35, -0.05], [0.35, -0.05], [-0.18, 0.45], [0.18, 0.45]])
_HEAD_RADIUS = 0.09
MAX_TRIES = 1000


@dataclass(frozen=True)
class GenConfig:
    image_side: int = 64
    person_count: tuple[int, int] = (1, 3)
    skeleton: SkeletonSpec = field(default=SYNTH_SKELETON)
    scale_range: tuple[float, float] = (22.0, 34.0)  # person height in pixels
    max_iou_range: tuple[float, float] = (0.0, 1.0)
    pose_jitter: float = 0.06  # keypoint jitter std as a fraction of height
    line_width: float = 1.6
    noise: float = 0.08

    def __post_init__(self):
        lo, hi = self.max_iou_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"maxIoU range {self.max_iou_range} must lie within [0, 1]")
        if self.person_count[0] < 1 or self.person_count[1] < self.person_count[0]:
            raise ValueError(f"bad person count range {self.person_count}")
        if self.skeleton.K != len(_TEMPLATE):
            raise ValueError("the stick-figure renderer draws exactly five keypoints")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skeleton"] = {"names": list(self.skeleton.names), "kappas": list(self.skeleton.kappas)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        d.pop("skeleton", None)
        for k in ("person_count", "scale_range", "max_iou_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def occlusion_stats(scene) -> list[float]:
    """Each person's maximum box IoU with any other person (0 when alone)."""
    persons = scene.persons if isinstance(scene, Scene) else scene
    if len(persons) < 2:
        return [0.0] * len(persons)
    m = iou_matrix(np.array([p.bbox for p in persons]))
    np.fill_diagonal(m, -np.inf)
    return [float(v) for v in m.max(axis=1)]


def _person(rng, config: GenConfig, center, height) -> PersonAnnotation | None:
    offsets = _TEMPLATE + rng.normal(0.0, config.pose_jitter, size=_TEMPLATE.shape)
    coords = np.asarray(center) + offsets * height
    if np.any(coords < 1.0) or np.any(coords > config.image_side - 1.0):
        return None
    pad = _HEAD_RADIUS * height
    lo = coords.min(axis=0) - pad
    hi = coords.max(axis=0) + pad
    side = config.image_side
    bbox = (max(lo[0], 0.0), max(lo[1], 0.0), min(hi[0], side), min(hi[1], side))
    return PersonAnnotation(KeypointSet(coords), bbox)


def _place(rng, config: GenConfig, n: int) -> list[PersonAnnotation]:
    side = config.image_side
    lo, hi = config.max_iou_range
    near = hi >= 0.1 and n > 1
    persons = []
    for i in range(n):
        h = rng.uniform(*config.scale_range)
        if near and i > 0 and rng.random() < 0.85:
            ref = persons[rng.integers(len(persons))].keypoints.coords.mean(axis=0)
            # tighter offsets when heavy overlap is requested
            spread = 1.0 - 0.6 * lo
            c = ref + rng.uniform(-1, 1, size=2) * spread * np.array([0.55 * h, 0.35 * h])
        else:
            c = rng.uniform(0.35 * h, side - 0.35 * h, size=2)
        p = _person(rng, config, c, h)
        if p is None:
            return None
        persons.append(p)
    return persons


def _inside(p: PersonAnnotation, side: int) -> bool:
    c = p.keypoints.coords
    return bool(np.all(c >= 1.0) and np.all(c <= side - 1.0))


def _acceptable(persons, config: GenConfig) -> bool:
    if persons is None:
        return False
    if not all(_inside(p, config.image_side) for p in persons):
        return False
    if len(persons) < 2:
        return True  # a lone person has no overlap to constrain
    lo, hi = config.max_iou_range
    return all(lo <= v <= hi for v in occlusion_stats(persons))


def _segment_distance(px, py, a, b):
    d = b - a
    L2 = float(d @ d)
    if L2 == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def render(persons, config: GenConfig, rng) -> np.ndarray:
    side = config.image_side
    py, px = np.mgrid[0:side, 0:side] + 0.5
    canvas = np.zeros((side, side))
    for p in persons:
        shade = rng.uniform(0.55, 1.0)
        coords = p.keypoints.coords
        height = p.bbox[3] - p.bbox[1]
        alpha = np.zeros_like(canvas)
        for a, b in config.skeleton.edges:
            d = _segment_distance(px, py, coords[a], coords[b])
            alpha = np.maximum(alpha, np.clip(config.line_width / 2 + 0.5 - d, 0.0, 1.0))
        r = max(_HEAD_RADIUS * height, 1.5)
        d = np.hypot(px - coords[0, 0], py - coords[0, 1])
        alpha = np.maximum(alpha, np.clip(r + 0.5 - d, 0.0, 1.0))
        canvas = canvas * (1 - alpha) + shade * alpha
    canvas += rng.uniform(-config.noise, config.noise, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)[:, :, None]


def sample_scene(config: GenConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    for _ in range(MAX_TRIES):
        n = int(rng.integers(config.person_count[0], config.person_count[1] + 1))
        persons = _place(rng, config, n)
        if _acceptable(persons, config):
            return Scene(tuple(persons), render(persons, config, rng), seed)
    raise RuntimeError(f"no placement within {MAX_TRIES} tries satisfies maxIoU range "
                       f"{config.max_iou_range}; try a wider range")


def generate(config: GenConfig, n: int, seed0: int = 0) -> list[Scene]:
    return [sample_scene(config, seed0 + i) for i in range(n)]


def scene_to_record(scene: Scene) -> dict:
    return {"seed": int(scene.seed), "persons": [person_to_record(p) for p in scene.persons]}


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".config.json")


def write_dataset(path, scenes, config: GenConfig) -> None:
    """JSON-lines annotations plus a sidecar echoing the generator config."""
    with open(path, "w") as f:
        for s in scenes:
            f.write(json.dumps(scene_to_record(s)) + "\n")
    with open(sidecar_path(path), "w") as f:
        json.dump(config.to_dict(), f, indent=2)


def read_records(path) -> list[tuple[int, list[PersonAnnotation]]]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append((int(rec["seed"]), [person_from_record(p) for p in rec["persons"]]))
    return out


def load_dataset(path, config: GenConfig | None = None) -> list[Scene]:
    """Regenerate scenes from their seeds and check them against the stored annotations."""
    if config is None:
        with open(sidecar_path(path)) as f:
            config = GenConfig.from_dict(json.load(f))
    scenes = []
    for seed, persons in read_records(path):
        scene = sample_scene(config, seed)
        stored = [person_to_record(p) for p in persons]
        if stored != [person_to_record(p) for p in scene.persons]:
            raise ValueError(f"scene with seed {seed} does not regenerate to its stored annotation")
        scenes.append(scene)
    return scenes
