"""Deterministic 3D primitives: boxes, IoU, membership queries, FPS, normalization.

All functions are pure and operate on float64 numpy arrays. Point clouds are
(N, 3) arrays; axis-aligned boxes are a center plus a size vector (orientation
is fixed to 0 throughout this project).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Point3:
    """A single point in scene coordinates."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass
class Box3:
    """Axis-aligned 3D bounding box with a semantic class.

    The orientation field is kept for data-model completeness but is always 0;
    every consumer in this codebase assumes axis-aligned extents.
    """

    center: np.ndarray
    size: np.ndarray
    class_id: int = -1
    orientation: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        if self.center.shape != (3,) or self.size.shape != (3,):
            raise ValueError("Box3 center and size must be length-3 vectors")
        if not (np.all(np.isfinite(self.center)) and np.all(np.isfinite(self.size))):
            raise ValueError("Box3 requires finite center and size")
        if np.any(self.size <= 0):
            raise ValueError(f"Box3 size components must be positive, got {self.size}")
        if self.orientation != 0.0:
            raise ValueError("Box3 orientation must be 0 in this project")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))


@dataclass
class PointCloud:
    """Ordered point set of a scene, stored as an (N, 3) float64 array."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("PointCloud expects an (N, 3) array")
        if self.points.shape[0] < 1:
            raise ValueError("PointCloud must contain at least one point")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class SceneTransform:
    """Affine record of a scene normalization: p' = (p - offset) * scale."""

    offset: np.ndarray
    scale: float

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return (points - self.offset) * self.scale

    def invert_points(self, points: np.ndarray) -> np.ndarray:
        return points / self.scale + self.offset

    def apply_box(self, box: Box3) -> Box3:
        return Box3(
            center=(box.center - self.offset) * self.scale,
            size=box.size * self.scale,
            class_id=box.class_id,
        )

    def invert_box(self, box: Box3) -> Box3:
        return Box3(
            center=box.center / self.scale + self.offset,
            size=box.size / self.scale,
            class_id=box.class_id,
        )


def iou_aabb(a: Box3, b: Box3) -> float:
    """Intersection-over-union of two axis-aligned boxes, in [0, 1]."""
    overlap = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
    if np.any(overlap <= 0):
        return 0.0
    inter = float(np.prod(overlap))
    union = a.volume + b.volume - inter
    return inter / union


def iou_matrix(
    centers_a: np.ndarray,
    sizes_a: np.ndarray,
    centers_b: np.ndarray,
    sizes_b: np.ndarray,
) -> np.ndarray:
    """Pairwise axis-aligned IoU between two box sets, shape (A, B)."""
    lo_a = centers_a - sizes_a / 2.0
    hi_a = centers_a + sizes_a / 2.0
    lo_b = centers_b - sizes_b / 2.0
    hi_b = centers_b + sizes_b / 2.0
    overlap = np.minimum(hi_a[:, None, :], hi_b[None, :, :]) - np.maximum(
        lo_a[:, None, :], lo_b[None, :, :]
    )
    overlap = np.clip(overlap, 0.0, None)
    inter = np.prod(overlap, axis=2)
    vol_a = np.prod(sizes_a, axis=1)
    vol_b = np.prod(sizes_b, axis=1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)
    return iou


def points_in_box(points: np.ndarray, center: np.ndarray, size: np.ndarray) -> np.ndarray:
    """Indices of points inside the half-open extent [lo, hi) of a box.

    Half-open intervals make membership a partition under box tiling; tests
    rely on this being bit-exact.
    """
    points = np.asarray(points, dtype=np.float64)
    lo = np.asarray(center, dtype=np.float64) - np.asarray(size, dtype=np.float64) / 2.0
    hi = np.asarray(center, dtype=np.float64) + np.asarray(size, dtype=np.float64) / 2.0
    mask = np.all((points >= lo) & (points < hi), axis=1)
    return np.nonzero(mask)[0]


def points_in_box_cloud(cloud: PointCloud, box: Box3) -> np.ndarray:
    """`points_in_box` over a PointCloud / Box3 pair."""
    return points_in_box(cloud.points, box.center, box.size)


def farthest_point_sample(
    points: np.ndarray,
    k: int,
    start: int | None = 0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Greedy max-min selection of k point indices.

    Each added index maximizes its minimum Euclidean distance to the already
    selected set; ties break to the lowest index (np.argmax convention). The
    start index defaults to 0 for reproducibility; pass start=None with an rng
    for a seeded-random start during training.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if start is None:
        if rng is None:
            raise ValueError("random start requires an rng")
        start = int(rng.integers(n))
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    min_dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        dist = np.linalg.norm(points - points[nxt], axis=1)
        np.minimum(min_dist, dist, out=min_dist)
    return selected


def covering_radius(points: np.ndarray, subset: np.ndarray) -> float:
    """Max over points of the distance to the nearest subset member."""
    d = np.linalg.norm(points[:, None, :] - points[subset][None, :, :], axis=2)
    return float(d.min(axis=1).max())


def normalize_scene(
    cloud: PointCloud, boxes: list[Box3]
) -> tuple[PointCloud, list[Box3], SceneTransform]:
    """Translate/scale a scene so the cloud fits [0, 1]^3, preserving aspect.

    Returns the normalized cloud, consistently transformed boxes, and a
    transform record allowing exact inversion.
    """
    pts = cloud.points
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    if extent <= 0:
        raise ValueError("degenerate cloud: all points identical")
    t = SceneTransform(offset=lo, scale=1.0 / extent)
    out_cloud = PointCloud(t.apply_points(pts))
    out_boxes = [t.apply_box(b) for b in boxes]
    return out_cloud, out_boxes, t


def greedy_nms(
    centers: np.ndarray,
    sizes: np.ndarray,
    scores: np.ndarray,
    iou_thresh: float,
) -> np.ndarray:
    """Class-agnostic greedy NMS; returns kept indices, highest score first.

    Score ties break to the lower index for determinism.
    """
    n = len(scores)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    iou = iou_matrix(centers, sizes, centers, sizes)
    kept: list[int] = []
    for i in order:
        if all(iou[i, j] < iou_thresh for j in kept):
            kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)
