"""Procedural 3D scenes, labeled/unlabeled splits, augmentation, persistence.

Scenes are generated directly in the unit cube: non-overlapping boxes with
class-conditional sizes, surface-sampled points with Gaussian noise, plus
uniform clutter. Classes are geometrically learnable because their mean sizes
are pairwise distinct.

The dataset file format is a versioned text format: one JSON header record
(format/version/config/split) followed by one JSON document per scene per
line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import Box3, PointCloud, iou_matrix

DATASET_FORMAT = "diffbox3d-dataset"
DATASET_VERSION = 1


@dataclass
class Scene:
    """A point cloud plus annotated ground-truth boxes."""

    cloud: PointCloud
    gt_boxes: list[Box3]
    scene_id: str


def default_class_size_means(n_classes: int) -> np.ndarray:
    """Pairwise-distinct per-class mean size vectors (the toy class semantics)."""
    scales = np.linspace(0.08, 0.28, n_classes)
    means = np.stack([scales, scales * 0.75, scales * 1.25], axis=1)
    return means


@dataclass
class SceneConfig:
    n_points: int = 2048
    n_classes: int = 6
    min_objects: int = 1
    max_objects: int = 4
    class_size_means: np.ndarray | None = None
    size_jitter: float = 0.08
    surface_noise: float = 0.005
    clutter_fraction: float = 0.1
    max_place_tries: int = 200

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.class_size_means is None:
            self.class_size_means = default_class_size_means(self.n_classes)
        self.class_size_means = np.asarray(self.class_size_means, dtype=np.float64)
        if self.class_size_means.shape != (self.n_classes, 3):
            raise ValueError("class_size_means must have shape (n_classes, 3)")
        if np.any(self.class_size_means <= 0):
            raise ValueError("class size means must be positive")
        for a in range(self.n_classes):
            for b in range(a + 1, self.n_classes):
                if np.allclose(self.class_size_means[a], self.class_size_means[b]):
                    raise ValueError(f"class size means {a} and {b} are not distinct")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_size_means"] = self.class_size_means.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["class_size_means"] = np.asarray(d["class_size_means"], dtype=np.float64)
        return cls(**d)


def _sample_box_surface(box: Box3, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the box surface, face-area weighted."""
    s = box.size
    areas = np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]])  # faces normal to x, y, z
    face_p = np.repeat(areas, 2)
    face_p = face_p / face_p.sum()
    faces = rng.choice(6, size=n, p=face_p)
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    pts = u * s
    axis = faces // 2
    sign = np.where(faces % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign * s[axis]
    return pts + box.center


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic procedural scene for one seed."""
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))

    boxes: list[Box3] = []
    tries = 0
    while len(boxes) < n_obj:
        if tries >= config.max_place_tries:
            raise RuntimeError(
                f"scene {seed}: failed to place {n_obj} non-overlapping boxes "
                f"after {config.max_place_tries} tries"
            )
        tries += 1
        cls = int(rng.integers(config.n_classes))
        mean = config.class_size_means[cls]
        size = mean * (1.0 + config.size_jitter * rng.standard_normal(3))
        size = np.clip(size, 0.02, 0.9)
        margin = 3.0 * config.surface_noise
        lo_c = size / 2.0 + margin
        hi_c = 1.0 - size / 2.0 - margin
        if np.any(hi_c <= lo_c):
            continue
        center = rng.uniform(lo_c, hi_c)
        cand = Box3(center=center, size=size, class_id=cls)
        if boxes:
            centers = np.stack([b.center for b in boxes])
            sizes = np.stack([b.size for b in boxes])
            iou = iou_matrix(cand.center[None], cand.size[None], centers, sizes)
            if np.any(iou > 0):
                continue
        boxes.append(cand)

    n_clutter = int(round(config.n_points * config.clutter_fraction))
    n_surface = config.n_points - n_clutter
    areas = np.array([2 * (b.size[0] * b.size[1] + b.size[1] * b.size[2] + b.size[0] * b.size[2]) for b in boxes])
    counts = rng.multinomial(n_surface, areas / areas.sum())
    parts = []
    for box, cnt in zip(boxes, counts):
        if cnt == 0:
            continue
        pts = _sample_box_surface(box, cnt, rng)
        pts += rng.normal(0.0, config.surface_noise, size=pts.shape)
        parts.append(pts)
    if n_clutter > 0:
        parts.append(rng.uniform(0.0, 1.0, size=(n_clutter, 3)))
    points = np.clip(np.concatenate(parts, axis=0), 0.0, 1.0)
    return Scene(cloud=PointCloud(points), gt_boxes=boxes, scene_id=f"scene-{seed:08d}")


def split_dataset(
    scenes: list[Scene], labeled_ratio: float, seed: int
) -> tuple[list[Scene], list[Scene]]:
    """Disjoint labeled/unlabeled partition with |labeled| = round(ratio * N)."""
    if not 0.0 < labeled_ratio < 1.0:
        raise ValueError(f"labeled_ratio must be in (0, 1), got {labeled_ratio}")
    n_labeled = int(round(labeled_ratio * len(scenes)))
    if n_labeled < 1:
        raise ValueError(
            f"labeled_ratio {labeled_ratio} yields zero labeled scenes out of {len(scenes)}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(scenes))
    labeled = [scenes[i] for i in sorted(perm[:n_labeled])]
    unlabeled = [scenes[i] for i in sorted(perm[n_labeled:])]
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

_CENTER = np.array([0.5, 0.5, 0.5])


@dataclass
class AugTransform:
    """Geometric transform plus point-only perturbations.

    Rotations are multiples of pi/2 about the vertical axis so axis-aligned
    boxes stay exact; the geometric part (flip -> rotate -> scale, all about
    the scene center) is invertible on boxes. Jitter/dropout affect points
    only.
    """

    flip_x: bool = False
    flip_y: bool = False
    rot_k: int = 0  # number of 90-degree turns about z
    scale: float = 1.0
    jitter_std: float = 0.0
    dropout_fraction: float = 0.0

    def __post_init__(self):
        if not 0.85 <= self.scale <= 1.15:
            raise ValueError(f"scale must be in [0.85, 1.15], got {self.scale}")
        self.rot_k = int(self.rot_k) % 4


def _rotate_xy(xy: np.ndarray, k: int) -> np.ndarray:
    c = {0: 1.0, 1: 0.0, 2: -1.0, 3: 0.0}[k]
    s = {0: 0.0, 1: 1.0, 2: 0.0, 3: -1.0}[k]
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def apply_to_points(points: np.ndarray, t: AugTransform) -> np.ndarray:
    """Geometric part of the transform applied to points (no jitter/dropout)."""
    p = points - _CENTER
    if t.flip_x:
        p = p * np.array([-1.0, 1.0, 1.0])
    if t.flip_y:
        p = p * np.array([1.0, -1.0, 1.0])
    p = np.concatenate([_rotate_xy(p[:, :2], t.rot_k), p[:, 2:]], axis=1)
    p = p * t.scale
    return p + _CENTER


def apply_to_boxes(boxes: list[Box3], t: AugTransform) -> list[Box3]:
    out = []
    for b in boxes:
        c = b.center - _CENTER
        if t.flip_x:
            c = c * np.array([-1.0, 1.0, 1.0])
        if t.flip_y:
            c = c * np.array([1.0, -1.0, 1.0])
        c = np.concatenate([_rotate_xy(c[:2], t.rot_k), c[2:]])
        c = c * t.scale + _CENTER
        size = b.size.copy()
        if t.rot_k % 2 == 1:
            size[[0, 1]] = size[[1, 0]]
        out.append(Box3(center=c, size=size * t.scale, class_id=b.class_id))
    return out


def apply_inverse_to_boxes(boxes: list[Box3], t: AugTransform) -> list[Box3]:
    """Exact inverse of the geometric part of the transform."""
    out = []
    for b in boxes:
        c = (b.center - _CENTER) / t.scale
        size = b.size / t.scale
        c = np.concatenate([_rotate_xy(c[:2], (-t.rot_k) % 4), c[2:]])
        if t.rot_k % 2 == 1:
            size = size.copy()
            size[[0, 1]] = size[[1, 0]]
        if t.flip_y:
            c = c * np.array([1.0, -1.0, 1.0])
        if t.flip_x:
            c = c * np.array([-1.0, 1.0, 1.0])
        out.append(Box3(center=c + _CENTER, size=size, class_id=b.class_id))
    return out


def draw_transform(strength: str, rng: np.random.Generator) -> AugTransform:
    if strength not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation strength {strength!r}")
    t = AugTransform(
        flip_x=bool(rng.integers(2)),
        flip_y=bool(rng.integers(2)),
        rot_k=int(rng.integers(4)),
    )
    if strength == "strong":
        t.scale = float(rng.uniform(0.85, 1.15))
        t.jitter_std = 0.004
        t.dropout_fraction = float(rng.uniform(0.0, 0.1))
    return t


def apply_transform(scene: Scene, t: AugTransform, rng: np.random.Generator) -> Scene:
    pts = apply_to_points(scene.cloud.points, t)
    if t.jitter_std > 0:
        pts = pts + rng.normal(0.0, t.jitter_std, size=pts.shape)
    if t.dropout_fraction > 0:
        keep = rng.random(len(pts)) >= t.dropout_fraction
        if not keep.any():
            keep[0] = True
        pts = pts[keep]
    return Scene(
        cloud=PointCloud(pts),
        gt_boxes=apply_to_boxes(scene.gt_boxes, t),
        scene_id=scene.scene_id,
    )


def augment(scene: Scene, strength: str, seed) -> tuple[Scene, AugTransform]:
    """Weak (flips + right-angle rotation) or strong (+ scale/jitter/dropout)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = draw_transform(strength, rng)
    return apply_transform(scene, t, rng), t


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    scenes: list[Scene]
    config: SceneConfig
    labeled_ids: list[str]
    unlabeled_ids: list[str]

    def labeled_scenes(self) -> list[Scene]:
        ids = set(self.labeled_ids)
        return [s for s in self.scenes if s.scene_id in ids]

    def unlabeled_scenes(self) -> list[Scene]:
        ids = set(self.unlabeled_ids)
        return [s for s in self.scenes if s.scene_id in ids]


class DatasetFormatError(ValueError):
    pass


def _scene_to_json(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "points": scene.cloud.points.tolist(),
        "boxes": [
            {"center": b.center.tolist(), "size": b.size.tolist(), "class_id": b.class_id}
            for b in scene.gt_boxes
        ],
    }


def _scene_from_json(d: dict) -> Scene:
    boxes = [
        Box3(center=np.array(b["center"]), size=np.array(b["size"]), class_id=int(b["class_id"]))
        for b in d["boxes"]
    ]
    return Scene(cloud=PointCloud(np.array(d["points"])), gt_boxes=boxes, scene_id=d["scene_id"])


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": dataset.config.to_json(),
        "labeled_ids": dataset.labeled_ids,
        "unlabeled_ids": dataset.unlabeled_ids,
        "n_scenes": len(dataset.scenes),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for scene in dataset.scenes:
            fh.write(json.dumps(_scene_to_json(scene)) + "\n")


def load_dataset(path) -> Dataset:
    offset = 0
    with open(path, "r") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0]:
        raise DatasetFormatError(f"{path}: empty dataset file at byte offset 0")

    def parse(line: str, offset: int, what: str) -> dict:
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(
                f"{path}: malformed {what} at byte offset {offset + exc.pos}: {exc.msg}"
            ) from exc

    header = parse(lines[0], 0, "header")
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{path}: unrecognized format {header.get('format')!r}")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported dataset version {header.get('version')!r} "
            f"(expected {DATASET_VERSION})"
        )
    config = SceneConfig.from_json(header["config"])
    offset = len(lines[0].encode()) + 1
    scenes = []
    for i, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        scenes.append(_scene_from_json(parse(line, offset, f"scene record (line {i})")))
        offset += len(line.encode()) + 1
    if len(scenes) != header["n_scenes"]:
        raise DatasetFormatError(
            f"{path}: truncated dataset at byte offset {offset}: expected "
            f"{header['n_scenes']} scenes, found {len(scenes)}"
        )
    return Dataset(
        scenes=scenes,
        config=config,
        labeled_ids=list(header["labeled_ids"]),
        unlabeled_ids=list(header["unlabeled_ids"]),
    )
