"""Domain types shared across the package.

Every coordinate is in input-pixel units: anchors, mixture means and scales,
ground-truth keypoints and boxes all live in the same frame.  Keypoint
vectors of length ``2K`` are interleaved as ``[x0, y0, x1, y1, ...]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Box = tuple[float, float, float, float]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SkeletonSpec:
    names: tuple[str, ...]
    kappas: tuple[float, ...]
    edges: tuple[tuple[int, int], ...] = ()
    # fixed grouping over the K + 1 trainable keypoints (center last)
    groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("skeleton needs at least one keypoint")
        if len(self.kappas) != len(self.names):
            raise ValueError(f"got {len(self.kappas)} kappas for {len(self.names)} keypoints")
        if any(k <= 0 for k in self.kappas):
            raise ValueError("OKS falloff constants must be positive")
        for a, b in self.edges:
            if not (0 <= a < self.K and 0 <= b < self.K):
                raise ValueError(f"edge ({a}, {b}) out of range for K={self.K}")
        if self.groups is not None:
            flat = sorted(i for g in self.groups for i in g)
            if flat != list(range(self.K + 1)):
                raise ValueError("preset groups must partition all K + 1 keypoint indices")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def K_total(self) -> int:
        """Keypoint count including the auxiliary box center."""
        return self.K + 1


# COCO order; kappa = 2 * sigma of the COCO evaluation constants.
_COCO_SIGMAS = (.026, .025, .025, .035, .035, .079, .079, .072, .072,
                .062, .062, .107, .107, .087, .087, .089, .089)

COCO_SKELETON = SkeletonSpec(
    names=("nose", "left_eye", "right_eye", "left_ear", "right_ear",
           "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
           "left_wrist", "right_wrist", "left_hip", "right_hip",
           "left_knee", "right_knee", "left_ankle", "right_ankle"),
    kappas=tuple(2 * s for s in _COCO_SIGMAS),
    edges=((15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
           (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
           (1, 3), (2, 4), (3, 5), (4, 6)),
    # left arm, left leg, right arm, right leg, eyes + nose, ears + center
    groups=((5, 7, 9), (11, 13, 15), (6, 8, 10), (12, 14, 16), (0, 1, 2), (3, 4, 17)),
)

SYNTH_SKELETON = SkeletonSpec(
    names=("head", "left_hand", "right_hand", "left_foot", "right_foot"),
    kappas=(0.1,) * 5,
    edges=((0, 1), (0, 2), (0, 3), (0, 4)),
    # upper body, lower body + center
    groups=((0, 1, 2), (3, 4, 5)),
)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    coords: np.ndarray  # (K, 2)
    visibility: np.ndarray  # (K,) bool

    def __init__(self, coords, visibility=None):
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        if visibility is None:
            visibility = np.ones(len(coords), dtype=bool)
        visibility = np.asarray(visibility, dtype=bool).reshape(-1)
        if len(visibility) != len(coords):
            raise ValueError(f"{len(coords)} coordinates but {len(visibility)} visibility flags")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "visibility", _frozen(visibility))

    @property
    def K(self) -> int:
        return len(self.coords)

    def flat(self) -> np.ndarray:
        """Interleaved ``[x0, y0, x1, y1, ...]`` vector."""
        return self.coords.reshape(-1)

    def flat_visibility(self) -> np.ndarray:
        return np.repeat(self.visibility, 2)

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (np.array_equal(self.coords, other.coords)
                and np.array_equal(self.visibility, other.visibility))


@dataclass(frozen=True)
class PersonAnnotation:
    keypoints: KeypointSet
    bbox: Box

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1:
            raise ValueError(f"malformed box {self.bbox}")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


@dataclass(frozen=True)
class PyramidLevel:
    index: int
    height: int
    width: int
    stride: int

    @property
    def scale(self) -> float:
        """Offset scale applied to raw mean outputs at this level."""
        return 2.0 ** (self.index - 5)

    @property
    def size(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[PyramidLevel, ...]
    image_side: int

    @classmethod
    def for_image(cls, side: int, level_indices: Sequence[int] = (3, 4)) -> "PyramidSpec":
        levels = []
        for l in level_indices:
            stride = 2 ** l
            if side % stride:
                raise ValueError(f"image side {side} not divisible by stride {stride}")
            levels.append(PyramidLevel(l, side // stride, side // stride, stride))
        return cls(tuple(levels), side)

    @property
    def num_components(self) -> int:
        return sum(lv.size for lv in self.levels)


@dataclass(frozen=True, eq=False)
class GridAnchors:
    centers: np.ndarray  # (M, 2) cell centers in pixels
    scales: np.ndarray  # (M,) per-component offset scale
    level_of: np.ndarray  # (M,) pyramid level index

    def as_mu(self, K_total: int) -> np.ndarray:
        """Anchor means broadcast to all ``2 * K_total`` dimensions."""
        return np.tile(self.centers, (1, K_total))

    def translated(self, dx: float, dy: float) -> "GridAnchors":
        return GridAnchors(self.centers + np.array([dx, dy]), self.scales, self.level_of)


def make_anchors(spec: PyramidSpec) -> GridAnchors:
    centers, scales, levels = [], [], []
    for lv in spec.levels:
        r, c = np.meshgrid(np.arange(lv.height), np.arange(lv.width), indexing="ij")
        xy = np.stack([(c.ravel() + 0.5) * lv.stride, (r.ravel() + 0.5) * lv.stride], axis=1)
        centers.append(xy)
        scales.append(np.full(lv.size, lv.scale))
        levels.append(np.full(lv.size, lv.index))
    return GridAnchors(_frozen(np.concatenate(centers).astype(np.float64)),
                       _frozen(np.concatenate(scales)), _frozen(np.concatenate(levels)))


@dataclass(frozen=True, eq=False)
class MixtureField:
    """All mixture components of one image.

    ``pi`` is derived from the foreground probabilities, ``pi = o / sum(o)``.
    """
    mu: np.ndarray  # (M, 2K)
    gamma: np.ndarray  # (M, 2K)
    o: np.ndarray  # (M,)
    pi: np.ndarray = field(init=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        gamma = np.asarray(self.gamma, dtype=np.float64)
        o = np.asarray(self.o, dtype=np.float64).reshape(-1)
        if mu.ndim != 2 or mu.shape != gamma.shape or mu.shape[0] != len(o):
            raise ValueError(f"inconsistent field shapes mu={mu.shape} gamma={gamma.shape} o={o.shape}")
        if mu.shape[1] % 2:
            raise ValueError("mean vectors must have an even number of entries")
        if not np.all(gamma > 0):
            raise ValueError("scale parameters must be positive")
        if np.any(o < 0):
            raise ValueError("foreground probabilities must be non-negative")
        total = o.sum()
        pi = o / total if total > 0 else np.zeros_like(o)
        for name, value in (("mu", mu), ("gamma", gamma), ("o", o), ("pi", pi)):
            object.__setattr__(self, name, _frozen(value))

    @property
    def M(self) -> int:
        return len(self.o)

    @property
    def K_total(self) -> int:
        return self.mu.shape[1] // 2

    def permuted(self, order) -> "MixtureField":
        order = np.asarray(order)
        return MixtureField(self.mu[order], self.gamma[order], self.o[order])


@dataclass(frozen=True)
class GroupPartition:
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise ValueError("partition needs at least one nonempty group")
        sizes = {len(g) for g in groups}
        if len(sizes) != 1:
            raise ValueError(f"groups have unequal sizes {sorted(sizes)}")
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(len(flat))):
            raise ValueError("groups must be disjoint and cover 0..K_total-1")
        object.__setattr__(self, "groups", groups)

    @property
    def K_g(self) -> int:
        return len(self.groups[0])

    @property
    def N_g(self) -> int:
        return len(self.groups)

    @property
    def K_total(self) -> int:
        return self.K_g * self.N_g

    def __iter__(self):
        return iter(self.groups)


def full_partition(K_total: int) -> GroupPartition:
    return GroupPartition((tuple(range(K_total)),))


@dataclass(frozen=True, eq=False)
class Scene:
    persons: tuple[PersonAnnotation, ...]
    image: np.ndarray  # (H, W, 1) in [0, 1]
    seed: int

    def __post_init__(self):
        if not self.persons:
            raise ValueError("scene needs at least one person")
        object.__setattr__(self, "persons", tuple(self.persons))
        object.__setattr__(self, "image", _frozen(self.image))


def pseudo_bbox(pose) -> Box:
    """Axis-aligned box spanned by the keypoint coordinates."""
    coords = pose.coords if isinstance(pose, KeypointSet) else np.asarray(pose, dtype=float).reshape(-1, 2)
    if len(coords) == 0:
        raise ValueError("pseudo_bbox of an empty keypoint set")
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def box_iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes: np.ndarray) -> np.ndarray:
    """Pairwise IoU of an (N, 4) box array; degenerate unions give 0."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes[:, None, 2], boxes[None, :, 2]) - np.maximum(boxes[:, None, 0], boxes[None, :, 0])
    ih = np.minimum(boxes[:, None, 3], boxes[None, :, 3]) - np.maximum(boxes[:, None, 1], boxes[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def person_to_record(p: PersonAnnotation) -> dict:
    kps = [[float(x), float(y), int(v)] for (x, y), v in zip(p.keypoints.coords, p.keypoints.visibility)]
    return {"bbox": [float(v) for v in p.bbox], "keypoints": kps}


def person_from_record(rec: dict) -> PersonAnnotation:
    kps = np.asarray(rec["keypoints"], dtype=np.float64).reshape(-1, 3)
    return PersonAnnotation(KeypointSet(kps[:, :2], kps[:, 2] > 0), tuple(rec["bbox"]))
