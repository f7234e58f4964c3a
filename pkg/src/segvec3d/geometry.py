"""Point-cloud containers, exact kNN search, voxel downsampling, and file I/O.

The kd-tree uses median splits with the split axis cycling by depth and is
exact: neighbor candidates are ranked by (distance, index), so ties always
resolve to the lowest point index. A built tree is immutable and may be
queried from many threads.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InvalidArgumentError

__all__ = [
    "PointCloud",
    "NeighborGraph",
    "KdTree",
    "build_knn_graph",
    "build_feature_knn",
    "voxel_downsample",
    "write_ply",
    "read_ply",
    "write_csv",
    "read_csv",
]


@dataclass
class PointCloud:
    """Positions in meters plus optional colors and instance annotations.

    colors are (N, 3) reals in [0, 1]. instance_labels are integers >= 0
    with -1 meaning unlabeled. category_names maps instance id -> phrase.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    instance_labels: np.ndarray | None = None
    category_names: dict[int, str] | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InvalidArgumentError("positions must be an (N, 3) array")
        if self.positions.shape[0] < 1:
            raise InvalidArgumentError("a point cloud needs at least one point")
        if not np.isfinite(self.positions).all():
            raise DataError("positions contain non-finite coordinates")
        n = self.positions.shape[0]
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float)
            if self.colors.shape != (n, 3):
                raise InvalidArgumentError("colors must be (N, 3)")
            if not np.isfinite(self.colors).all():
                raise DataError("colors contain non-finite values")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
            if self.instance_labels.shape != (n,):
                raise InvalidArgumentError("instance_labels must have length N")
            if (self.instance_labels < -1).any():
                raise InvalidArgumentError("instance labels must be >= -1")
        if self.category_names:
            if self.instance_labels is None:
                raise InvalidArgumentError("category_names given without instance_labels")
            present = set(np.unique(self.instance_labels).tolist())
            missing = set(self.category_names) - present
            if missing:
                raise InvalidArgumentError(
                    f"category_names reference absent instance ids {sorted(missing)}"
                )

    @property
    def n(self):
        return self.positions.shape[0]


@dataclass
class NeighborGraph:
    """Per-point k nearest neighbors: index rows and matching distances.

    Each row is sorted by ascending distance with ties broken by ascending
    point index, never contains the row's own index, and holds k distinct
    indices.
    """

    k: int
    neighbors: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.neighbors = np.asarray(self.neighbors, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=float)
        if self.neighbors.shape != self.distances.shape:
            raise InvalidArgumentError("neighbors and distances shapes differ")
        if self.neighbors.ndim != 2 or self.neighbors.shape[1] != self.k:
            raise InvalidArgumentError("neighbor matrix must be (N, k)")

    @property
    def n(self):
        return self.neighbors.shape[0]


class KdTree:
    """Exact k-nearest-neighbor and radius index over (N, d) points.

    Median-split construction; points live in the leaves. Queries rank
    candidates lexicographically by (distance, index).
    """

    _LEAF = -1

    def __init__(self, points, leaf_size=32):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[0] < 1:
            raise InvalidArgumentError("points must be a non-empty (N, d) array")
        if not np.isfinite(points).all():
            raise DataError("points contain non-finite values")
        if leaf_size < 1:
            raise InvalidArgumentError("leaf_size must be positive")
        self.points = points
        self.n, self.dim = points.shape
        self._leaf_size = leaf_size
        # flat node arrays; axis == _LEAF marks a leaf addressing _order[lo:hi]
        self._axis = []
        self._threshold = []
        self._left = []
        self._right = []
        self._lo = []
        self._hi = []
        self._order = np.arange(self.n)
        self._build(0, self.n, 0)
        self._axis = np.asarray(self._axis)
        self._threshold = np.asarray(self._threshold)
        self._left = np.asarray(self._left)
        self._right = np.asarray(self._right)
        self._lo = np.asarray(self._lo)
        self._hi = np.asarray(self._hi)

    def _new_node(self):
        self._axis.append(self._LEAF)
        self._threshold.append(0.0)
        self._left.append(-1)
        self._right.append(-1)
        self._lo.append(0)
        self._hi.append(0)
        return len(self._axis) - 1

    def _build(self, lo, hi, depth):
        node = self._new_node()
        count = hi - lo
        if count <= self._leaf_size:
            self._lo[node] = lo
            self._hi[node] = hi
            return node
        axis = depth % self.dim
        seg = self._order[lo:hi]
        seg = seg[np.argsort(self.points[seg, axis], kind="stable")]
        self._order[lo:hi] = seg
        mid = lo + count // 2
        self._axis[node] = axis
        self._threshold[node] = self.points[self._order[mid], axis]
        left = self._build(lo, mid, depth + 1)
        right = self._build(mid, hi, depth + 1)
        self._left[node] = left
        self._right[node] = right
        return node

    def query(self, point, k):
        """Return (indices, distances) of the k nearest points, sorted by
        (distance, index) ascending."""
        point = np.asarray(point, dtype=float)
        if point.shape != (self.dim,):
            raise InvalidArgumentError(f"query point must have dimension {self.dim}")
        if not 1 <= k <= self.n:
            raise InvalidArgumentError(f"k must be in [1, {self.n}]")
        # max-heap over (-dist2, -index): the root is the current worst pair
        heap = []
        self._knn_visit(0, point, k, heap)
        pairs = sorted((-d2, -i) for d2, i in heap)
        idx = np.array([p[1] for p in pairs], dtype=np.int64)
        dist = np.sqrt(np.array([p[0] for p in pairs]))
        return idx, dist

    def _knn_visit(self, node, point, k, heap):
        axis = self._axis[node]
        if axis == self._LEAF:
            ids = self._order[self._lo[node] : self._hi[node]]
            diffs = self.points[ids] - point
            d2s = np.einsum("ij,ij->i", diffs, diffs)
            for d2, i in zip(d2s.tolist(), ids.tolist()):
                if len(heap) < k:
                    heapq.heappush(heap, (-d2, -i))
                else:
                    worst_d2, worst_i = -heap[0][0], -heap[0][1]
                    if (d2, i) < (worst_d2, worst_i):
                        heapq.heapreplace(heap, (-d2, -i))
            return
        delta = point[axis] - self._threshold[node]
        near, far = (
            (self._left[node], self._right[node])
            if delta < 0
            else (self._right[node], self._left[node])
        )
        self._knn_visit(near, point, k, heap)
        # the far child only holds points at axis-distance >= |delta|
        if len(heap) < k or delta * delta <= -heap[0][0]:
            self._knn_visit(far, point, k, heap)

    def query_radius(self, point, radius):
        """Return ascending indices of all points within distance <= radius."""
        point = np.asarray(point, dtype=float)
        if point.shape != (self.dim,):
            raise InvalidArgumentError(f"query point must have dimension {self.dim}")
        if radius < 0:
            raise InvalidArgumentError("radius must be nonnegative")
        out = []
        r2 = radius * radius
        stack = [0]
        while stack:
            node = stack.pop()
            axis = self._axis[node]
            if axis == self._LEAF:
                ids = self._order[self._lo[node] : self._hi[node]]
                diffs = self.points[ids] - point
                d2s = np.einsum("ij,ij->i", diffs, diffs)
                out.append(ids[d2s <= r2])
                continue
            delta = point[axis] - self._threshold[node]
            if delta <= radius:
                stack.append(self._left[node])
            if -delta <= radius:
                stack.append(self._right[node])
        if not out:
            return np.empty(0, dtype=np.int64)
        merged = np.concatenate(out)
        merged.sort()
        return merged


def _knn_graph_from_points(points, k):
    n = points.shape[0]
    if k < 1:
        raise InvalidArgumentError("k must be positive")
    if k >= n:
        raise InvalidArgumentError(f"k={k} must be smaller than the point count {n}")
    tree = KdTree(points)
    neighbors = np.empty((n, k), dtype=np.int64)
    distances = np.empty((n, k))
    for i in range(n):
        # query k+1 and drop the query point itself (always rank 0: distance
        # zero and the smallest index among zero-distance candidates is i
        # only when no duplicate with a lower index exists, so filter by id)
        idx, dist = tree.query(points[i], k + 1)
        keep = idx != i
        neighbors[i] = idx[keep][:k]
        distances[i] = dist[keep][:k]
    return NeighborGraph(k=k, neighbors=neighbors, distances=distances)


def build_knn_graph(cloud, k):
    """Exact Euclidean kNN over cloud positions; ties break by point index."""
    return _knn_graph_from_points(cloud.positions, k)


def build_feature_knn(features, k):
    """Exact kNN in feature space, same contract as build_knn_graph."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise InvalidArgumentError("features must be an (N, d) matrix")
    if not np.isfinite(features).all():
        raise DataError("features contain non-finite values")
    return _knn_graph_from_points(features, k)


def voxel_downsample(cloud, voxel_size):
    """Collapse each occupied voxel to the centroid of its member points.

    Colors are averaged; the instance label becomes the majority label of
    the members with ties going to the smallest label value. Output points
    are ordered by voxel grid coordinate.
    """
    if voxel_size <= 0:
        raise InvalidArgumentError("voxel_size must be positive")
    pos = cloud.positions
    keys = np.floor((pos - pos.min(axis=0)) / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    m = uniq.shape[0]
    counts = np.bincount(inverse, minlength=m).astype(float)
    centroids = np.empty((m, 3))
    for c in range(3):
        centroids[:, c] = np.bincount(inverse, weights=pos[:, c], minlength=m) / counts
    colors = None
    if cloud.colors is not None:
        colors = np.empty((m, 3))
        for c in range(3):
            colors[:, c] = (
                np.bincount(inverse, weights=cloud.colors[:, c], minlength=m) / counts
            )
    labels = None
    categories = None
    if cloud.instance_labels is not None:
        labels = np.empty(m, dtype=np.int64)
        pairs, pair_counts = np.unique(
            np.stack([inverse, cloud.instance_labels]), axis=1, return_counts=True
        )
        # pairs columns are sorted by (voxel, label); scanning in order and
        # keeping the first strict-max count per voxel realizes the
        # majority-with-smallest-label-tie rule
        best = {}
        for (vox, lab), cnt in zip(pairs.T.tolist(), pair_counts.tolist()):
            if vox not in best or cnt > best[vox][0]:
                best[vox] = (cnt, lab)
        for vox, (_, lab) in best.items():
            labels[vox] = lab
        if cloud.category_names:
            surviving = set(np.unique(labels).tolist())
            categories = {
                i: name for i, name in cloud.category_names.items() if i in surviving
            }
    return PointCloud(
        positions=centroids,
        colors=colors,
        instance_labels=labels,
        category_names=categories,
    )


# ---------------------------------------------------------------------------
# File formats: ASCII PLY and headered CSV
# ---------------------------------------------------------------------------

_PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_PLY_INT_TYPES = {"char", "uchar", "int8", "uint8", "short", "ushort", "int16",
                  "uint16", "int", "uint", "int32", "uint32"}


def write_ply(cloud, path, extra_int_columns=None):
    """Write an ASCII PLY file with x,y,z plus optional colors/labels.

    extra_int_columns maps property name -> (N,) integer array and is
    appended after the standard properties (used e.g. for a `selected`
    highlight column).
    """
    extra_int_columns = extra_int_columns or {}
    n = cloud.n
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property double {axis}" for axis in "xyz"]
    if cloud.colors is not None:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    if cloud.instance_labels is not None:
        lines.append("property int instance")
    for name, col in extra_int_columns.items():
        if np.asarray(col).shape != (n,):
            raise InvalidArgumentError(f"extra column {name!r} must have length N")
        lines.append(f"property int {name}")
    lines.append("end_header")
    rgb = None
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(int)
    for i in range(n):
        parts = [repr(float(v)) for v in cloud.positions[i]]
        if rgb is not None:
            parts += [str(v) for v in rgb[i]]
        if cloud.instance_labels is not None:
            parts.append(str(int(cloud.instance_labels[i])))
        for col in extra_int_columns.values():
            parts.append(str(int(col[i])))
        lines.append(" ".join(parts))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path):
    """Parse an ASCII PLY file into (PointCloud, extra_columns).

    Recognizes x/y/z, red/green/blue, and instance; any other integer
    property is returned in extra_columns. Raises DataError with the
    offending line number on malformed or non-finite input.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0].strip() != "ply":
        raise DataError("not a PLY file: missing 'ply' magic", line=1)
    n_vertex = None
    props = []  # (name, is_float)
    header_end = None
    for ln, line in enumerate(raw[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise DataError("only ascii PLY is supported", line=ln)
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                raise DataError(f"unsupported element {tokens[1]!r}", line=ln)
            n_vertex = int(tokens[2])
        elif tokens[0] == "property":
            if tokens[1] == "list":
                raise DataError("list properties are not supported", line=ln)
            ptype, name = tokens[1], tokens[2]
            if ptype in _PLY_FLOAT_TYPES:
                props.append((name, True))
            elif ptype in _PLY_INT_TYPES:
                props.append((name, False))
            else:
                raise DataError(f"unknown property type {ptype!r}", line=ln)
        elif tokens[0] == "end_header":
            header_end = ln
            break
    if header_end is None:
        raise DataError("missing end_header", line=len(raw))
    if n_vertex is None:
        raise DataError("missing vertex element", line=header_end)
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise DataError(f"missing required property {axis!r}", line=header_end)
    columns = {name: [] for name in names}
    data_lines = raw[header_end:]
    if len([l for l in data_lines if l.strip()]) < n_vertex:
        raise DataError(
            f"expected {n_vertex} data rows, file ends early", line=len(raw)
        )
    row = 0
    for ln, line in enumerate(raw[header_end:], start=header_end + 1):
        if row >= n_vertex:
            break
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != len(props):
            raise DataError(
                f"expected {len(props)} values, got {len(tokens)}", line=ln
            )
        for (name, is_float), tok in zip(props, tokens):
            try:
                val = float(tok)
            except ValueError:
                raise DataError(f"cannot parse value {tok!r}", line=ln) from None
            if not np.isfinite(val):
                raise DataError(f"non-finite value in property {name!r}", line=ln)
            columns[name].append(val if is_float else int(val))
        row += 1
    return _cloud_from_columns(columns, color_scale=255.0)


def _cloud_from_columns(columns, color_scale):
    positions = np.stack(
        [np.asarray(columns[a], dtype=float) for a in "xyz"], axis=1
    )
    colors = None
    color_keys = [k for k in ("red", "green", "blue", "r", "g", "b") if k in columns]
    if len(color_keys) >= 3:
        colors = np.stack(
            [np.asarray(columns[k], dtype=float) for k in color_keys[:3]], axis=1
        )
        colors = colors / color_scale if color_scale != 1.0 else colors
        colors = np.clip(colors, 0.0, 1.0)
    labels = None
    if "instance" in columns:
        labels = np.asarray(columns["instance"], dtype=np.int64)
    handled = set("xyz") | set(color_keys[:3]) | {"instance"}
    extras = {
        k: np.asarray(v) for k, v in columns.items() if k not in handled
    }
    cloud = PointCloud(positions=positions, colors=colors, instance_labels=labels)
    return cloud, extras


def write_csv(cloud, path, extra_int_columns=None):
    """Write the one-line-header CSV format: x,y,z[,r,g,b][,instance][,...]."""
    extra_int_columns = extra_int_columns or {}
    header = ["x", "y", "z"]
    if cloud.colors is not None:
        header += ["r", "g", "b"]
    if cloud.instance_labels is not None:
        header.append("instance")
    header += list(extra_int_columns)
    rows = [",".join(header)]
    for i in range(cloud.n):
        parts = [repr(float(v)) for v in cloud.positions[i]]
        if cloud.colors is not None:
            parts += [repr(float(v)) for v in cloud.colors[i]]
        if cloud.instance_labels is not None:
            parts.append(str(int(cloud.instance_labels[i])))
        for col in extra_int_columns.values():
            parts.append(str(int(col[i])))
        rows.append(",".join(parts))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


def read_csv(path):
    """Parse the headered CSV point format into (PointCloud, extra_columns)."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise DataError("empty file", line=1)
    names = [t.strip() for t in raw[0].split(",")]
    for axis in "xyz":
        if axis not in names:
            raise DataError(f"missing required column {axis!r}", line=1)
    int_columns = {"instance"} | (set(names) - {"x", "y", "z", "r", "g", "b"})
    columns = {name: [] for name in names}
    for ln, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        tokens = [t.strip() for t in line.split(",")]
        if len(tokens) != len(names):
            raise DataError(
                f"expected {len(names)} values, got {len(tokens)}", line=ln
            )
        for name, tok in zip(names, tokens):
            try:
                val = float(tok)
            except ValueError:
                raise DataError(f"cannot parse value {tok!r}", line=ln) from None
            if not np.isfinite(val):
                raise DataError(f"non-finite value in column {name!r}", line=ln)
            columns[name].append(int(val) if name in int_columns else val)
    if not columns["x"]:
        raise DataError("no data rows", line=len(raw))
    return _cloud_from_columns(columns, color_scale=1.0)
