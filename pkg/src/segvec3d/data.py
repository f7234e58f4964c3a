"""Synthetic desk-scale scenes with ground-truth instances, dataset splits,
and the category-name text table builder.

Scenes are sampled inside a 4 x 4 x 2.5 m room: shape objects (box /
sphere / cylinder, unit-sized primitives) get random upright poses with
overlap rejection, optionally joined by a floor and a wall plane. Every
point carries exactly one instance label and every instance a category
name. Generation is a pure function of the spec's seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DimensionalityTooSmallError,
    InvalidArgumentError,
    PlacementFailureError,
)
from .geometry import PointCloud, read_csv, read_ply, write_csv, write_ply
from .multimodal import TextEmbeddingTable, normalize_phrase

__all__ = [
    "SceneSpec",
    "SHAPE_TYPES",
    "PLANE_TYPES",
    "generate_scene",
    "split_dataset",
    "build_text_table_for_categories",
    "save_scene",
    "load_scene",
    "write_category_sidecar",
    "read_category_sidecar",
    "sidecar_path",
]

SHAPE_TYPES = ("box", "sphere", "cylinder")
PLANE_TYPES = ("plane-floor", "plane-wall")

ROOM_HALF_X = 2.0
ROOM_HALF_Y = 2.0
ROOM_HEIGHT = 2.5
FLOOR_CLEARANCE = 0.02  # shapes hover slightly so contact zones stay clean
# bounding circles overstate yaw-rotated boxes, so allow generous overlap
PLACEMENT_TOLERANCE = 0.35
MAX_PLACEMENT_REJECTIONS = 1000

# xy bounding radius of each canonical (unit-sized) primitive
_BOUND_RADIUS = {"box": np.sqrt(2.0) / 2.0, "sphere": 0.5, "cylinder": 0.3}
_HALF_HEIGHT = {"box": 0.5, "sphere": 0.5, "cylinder": 0.5}

# random per-object scale: same-shape objects in one scene are kept at
# least MIN_SIZE_GAP apart in scale so instances stay geometrically
# discernible by relative (translation-invariant) features
SIZE_RANGE = (0.5, 1.1)
MIN_SIZE_GAP = 0.08


@dataclass
class SceneSpec:
    """Generator parameters; both ranges are inclusive."""

    num_objects: tuple[int, int] = (4, 6)
    object_types: tuple[str, ...] = SHAPE_TYPES + PLANE_TYPES
    points_per_object: tuple[int, int] = (250, 400)
    pose_jitter: float = 1.0
    noise_sigma: float = 0.005
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.num_objects
        plo, phi = self.points_per_object
        if lo > hi or lo < 0 or plo > phi or plo < 1:
            raise InvalidArgumentError("ranges must be non-empty")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise sigma must be nonnegative")
        if self.pose_jitter < 0:
            raise InvalidArgumentError("pose jitter must be nonnegative")
        known = set(SHAPE_TYPES) | set(PLANE_TYPES)
        if not self.object_types or not set(self.object_types) <= known:
            raise InvalidArgumentError(f"object_types must be a non-empty subset of {sorted(known)}")


def _sample_box(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    for a in range(3):
        mask = axis == a
        others = [b for b in range(3) if b != a]
        pts[mask, a] = sign[mask]
        pts[mask, others[0]] = uv[mask, 0]
        pts[mask, others[1]] = uv[mask, 1]
    return pts


def _sample_sphere(rng, n, radius=0.5):
    vecs = rng.standard_normal((n, 3))
    norms = np.linalg.norm(vecs, axis=1)
    while (norms < 1e-12).any():
        bad = norms < 1e-12
        vecs[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(vecs, axis=1)
    return radius * vecs / norms[:, None]


def _sample_cylinder(rng, n, radius=0.3, height=1.0):
    lateral_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius * radius
    total = lateral_area + 2.0 * cap_area
    part = rng.uniform(0.0, total, size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    pts = np.empty((n, 3))
    on_side = part < lateral_area
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = (u[on_side] - 0.5) * height
    on_cap = ~on_side
    r = radius * np.sqrt(u[on_cap])
    pts[on_cap, 0] = r * np.cos(theta[on_cap])
    pts[on_cap, 1] = r * np.sin(theta[on_cap])
    pts[on_cap, 2] = np.where(part[on_cap] < lateral_area + cap_area, -0.5, 0.5) * height
    return pts


_SAMPLERS = {"box": _sample_box, "sphere": _sample_sphere, "cylinder": _sample_cylinder}


def _rotation(yaw, tilt, tilt_axis_angle):
    cz, sz = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ca, sa = np.cos(tilt_axis_angle), np.sin(tilt_axis_angle)
    axis = np.array([ca, sa, 0.0])
    ct, st = np.cos(tilt), np.sin(tilt)
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    tilt_mat = np.eye(3) + st * k + (1.0 - ct) * (k @ k)
    return rz @ tilt_mat


def _sample_size(rng, shape, jitter, used_sizes):
    """Per-object scale; jitter == 0 keeps the canonical unit size."""
    if jitter == 0.0:
        return 1.0
    for _ in range(MAX_PLACEMENT_REJECTIONS):
        size = rng.uniform(*SIZE_RANGE)
        if all(abs(size - s) >= MIN_SIZE_GAP for s in used_sizes.get(shape, [])):
            used_sizes.setdefault(shape, []).append(size)
            return size
    raise PlacementFailureError(
        f"could not find a distinct size for a {shape} after "
        f"{MAX_PLACEMENT_REJECTIONS} rejections"
    )


def _place_shape(rng, shape, size, jitter, placed):
    """Sample an upright pose with bounding-circle overlap rejection."""
    if jitter == 0.0:
        return np.eye(3), np.zeros(3)
    radius = _BOUND_RADIUS[shape] * size
    margin = radius + 0.05
    for _ in range(MAX_PLACEMENT_REJECTIONS):
        yaw = rng.uniform(-np.pi, np.pi)
        tilt = rng.normal(0.0, 0.05 * min(jitter, 1.0))
        tilt_axis = rng.uniform(0.0, 2.0 * np.pi)
        cx = rng.uniform(-ROOM_HALF_X + margin, ROOM_HALF_X - margin)
        cy = rng.uniform(-ROOM_HALF_Y + margin, ROOM_HALF_Y - margin)
        ok = all(
            np.hypot(cx - px, cy - py) >= radius + pr - PLACEMENT_TOLERANCE
            for px, py, pr in placed
        )
        if not ok:
            continue
        cz = _HALF_HEIGHT[shape] * size + FLOOR_CLEARANCE
        placed.append((cx, cy, radius))
        return _rotation(yaw, tilt, tilt_axis), np.array([cx, cy, cz])
    raise PlacementFailureError(
        f"could not place a {shape} after {MAX_PLACEMENT_REJECTIONS} rejections"
    )


def generate_scene(spec):
    """Sample one labeled scene; equal seeds give bit-identical clouds."""
    rng = np.random.default_rng(spec.seed)
    shape_choices = [t for t in spec.object_types if t in SHAPE_TYPES]
    lo, hi = spec.num_objects
    n_shapes = int(rng.integers(lo, hi + 1)) if shape_choices else 0
    plo, phi = spec.points_per_object

    chunks, labels, categories = [], [], {}
    placed = []
    used_sizes = {}
    next_id = 0
    for _ in range(n_shapes):
        shape = str(rng.choice(shape_choices))
        n_pts = int(rng.integers(plo, phi + 1))
        size = _sample_size(rng, shape, spec.pose_jitter, used_sizes)
        canonical = _SAMPLERS[shape](rng, n_pts) * size
        rot, center = _place_shape(rng, shape, size, spec.pose_jitter, placed)
        chunks.append(canonical @ rot.T + center)
        labels.append(np.full(n_pts, next_id))
        categories[next_id] = shape
        next_id += 1
    if "plane-floor" in spec.object_types:
        n_pts = 2 * int(rng.integers(plo, phi + 1))
        xy = rng.uniform(
            [-ROOM_HALF_X, -ROOM_HALF_Y], [ROOM_HALF_X, ROOM_HALF_Y], size=(n_pts, 2)
        )
        chunks.append(np.column_stack([xy, np.zeros(n_pts)]))
        labels.append(np.full(n_pts, next_id))
        categories[next_id] = "floor"
        next_id += 1
    if "plane-wall" in spec.object_types:
        n_pts = 2 * int(rng.integers(plo, phi + 1))
        xz = rng.uniform([-ROOM_HALF_X, 0.0], [ROOM_HALF_X, ROOM_HEIGHT], size=(n_pts, 2))
        chunks.append(np.column_stack([xz[:, 0], np.full(n_pts, -ROOM_HALF_Y), xz[:, 1]]))
        labels.append(np.full(n_pts, next_id))
        categories[next_id] = "wall"
        next_id += 1
    if not chunks:
        raise InvalidArgumentError("spec produces an empty scene")
    positions = np.concatenate(chunks, axis=0)
    instance_labels = np.concatenate(labels).astype(np.int64)
    if spec.noise_sigma > 0:
        positions = positions + rng.normal(0.0, spec.noise_sigma, size=positions.shape)
    base_colors = rng.uniform(0.15, 0.95, size=(next_id, 3))
    colors = np.clip(
        base_colors[instance_labels] + rng.normal(0.0, 0.02, size=positions.shape),
        0.0,
        1.0,
    )
    return PointCloud(
        positions=positions,
        colors=colors,
        instance_labels=instance_labels,
        category_names=categories,
    )


def split_dataset(scenes, train_fraction, seed):
    """Seeded shuffle-and-split into disjoint, exhaustive (train, heldout)."""
    if len(scenes) < 2:
        raise InvalidArgumentError("need at least two scenes to split")
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError("train_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(scenes))
    n_train = int(round(train_fraction * len(scenes)))
    n_train = min(max(n_train, 1), len(scenes) - 1)
    train = [scenes[i] for i in perm[:n_train]]
    heldout = [scenes[i] for i in perm[n_train:]]
    return train, heldout


def build_text_table_for_categories(categories, dim=64, seed=0, max_abs_cos=0.3):
    """Near-orthogonal unit vectors for category phrases.

    Each vector is a seeded gaussian direction resampled until its |cos|
    against every accepted vector is below max_abs_cos; exhausting the
    resample budget raises DimensionalityTooSmallError.
    """
    phrases = [normalize_phrase(c) for c in categories]
    if not phrases or any(not p for p in phrases):
        raise InvalidArgumentError("categories must be non-empty phrases")
    if len(set(phrases)) != len(phrases):
        raise InvalidArgumentError("categories must be unique")
    rng = np.random.default_rng(seed)
    accepted = []
    entries = {}
    for phrase in phrases:
        for _ in range(1000):
            v = rng.standard_normal(dim)
            v = v / np.linalg.norm(v)
            if all(abs(float(v @ u)) < max_abs_cos for u in accepted):
                accepted.append(v)
                entries[phrase] = v
                break
        else:
            raise DimensionalityTooSmallError(
                f"cannot fit {len(phrases)} near-orthogonal vectors in dim {dim}"
            )
    return TextEmbeddingTable(dim=dim, entries=entries)


# ---------------------------------------------------------------------------
# Scene persistence: cloud file + category sidecar
# ---------------------------------------------------------------------------


def sidecar_path(cloud_path):
    p = Path(cloud_path)
    return p.with_name(p.stem + ".categories.tsv")


def write_category_sidecar(categories, path):
    lines = [f"{int(i)}\t{categories[i]}" for i in sorted(categories)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_category_sidecar(path):
    categories = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh.read().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError("expected 'instance_id<TAB>phrase'", line=ln)
            try:
                key = int(parts[0])
            except ValueError:
                raise DataError(f"bad instance id {parts[0]!r}", line=ln) from None
            if key in categories:
                raise DataError(f"duplicate instance id {key}", line=ln)
            categories[key] = parts[1]
    return categories


def save_scene(cloud, path):
    """Write a cloud as .ply or .csv (by extension) plus, when the cloud
    has category names, the instance_id<TAB>phrase sidecar."""
    path = Path(path)
    if path.suffix == ".ply":
        write_ply(cloud, path)
    elif path.suffix == ".csv":
        write_csv(cloud, path)
    else:
        raise InvalidArgumentError(f"unsupported scene format {path.suffix!r}")
    if cloud.category_names:
        write_category_sidecar(cloud.category_names, sidecar_path(path))


def load_scene(path):
    """Read a scene written by save_scene, reattaching category names."""
    path = Path(path)
    if path.suffix == ".ply":
        cloud, _ = read_ply(path)
    elif path.suffix == ".csv":
        cloud, _ = read_csv(path)
    else:
        raise InvalidArgumentError(f"unsupported scene format {path.suffix!r}")
    side = sidecar_path(path)
    if side.exists() and cloud.instance_labels is not None:
        cloud.category_names = read_category_sidecar(side)
        present = set(np.unique(cloud.instance_labels).tolist())
        cloud.category_names = {
            i: p for i, p in cloud.category_names.items() if i in present
        }
    return cloud
