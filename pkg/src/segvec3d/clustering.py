"""Instance extraction from per-point embeddings, plus the ARI metric.

Three clusterers share one output convention: labels are contiguous ids
0..num_instances-1 ordered by each cluster's smallest member index, with -1
reserved for DBSCAN noise. All of them operate on Euclidean distance in
embedding space and are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geometry import KdTree

__all__ = [
    "InstanceSegmentation",
    "dbscan",
    "mean_shift",
    "radius_linkage",
    "adjusted_rand_index",
]


@dataclass
class InstanceSegmentation:
    """Per-point instance ids (>= 0) with -1 meaning noise."""

    labels: np.ndarray
    num_instances: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.unique(self.labels[self.labels >= 0])
        expected = np.arange(len(ids))
        if len(ids) != self.num_instances or not np.array_equal(ids, expected):
            raise InvalidArgumentError("instance ids must be contiguous from 0")


def _relabel_by_first_member(raw_labels):
    """Map cluster keys to contiguous ids ordered by smallest member index."""
    labels = np.asarray(raw_labels, dtype=np.int64)
    out = np.full(labels.shape, -1, dtype=np.int64)
    mapping = {}
    for i, lab in enumerate(labels.tolist()):
        if lab < 0:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return InstanceSegmentation(labels=out, num_instances=len(mapping))


def _as_matrix(embeddings):
    e = np.asarray(embeddings, dtype=float)
    if e.ndim != 2 or e.shape[0] < 1:
        raise InvalidArgumentError("embeddings must be a non-empty (N, d) matrix")
    return e


def dbscan(embeddings, eps, min_pts):
    """Density-based clustering with deterministic ascending-index expansion.

    A core point has at least min_pts neighbors within eps (itself
    included). Border points join the first core cluster whose expansion
    reaches them; unreachable points stay noise (-1).
    """
    if eps <= 0:
        raise InvalidArgumentError("eps must be positive")
    if min_pts < 1:
        raise InvalidArgumentError("min_pts must be >= 1")
    e = _as_matrix(embeddings)
    n = e.shape[0]
    tree = KdTree(e)
    neighborhoods = [None] * n

    def region(i):
        if neighborhoods[i] is None:
            neighborhoods[i] = tree.query_radius(e[i], eps)
        return neighborhoods[i]

    UNVISITED = -2
    labels = np.full(n, UNVISITED, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != UNVISITED:
            continue
        nbrs = region(i)
        if len(nbrs) < min_pts:
            labels[i] = -1
            continue
        labels[i] = cluster
        queue = [j for j in nbrs.tolist() if j != i]
        qi = 0
        while qi < len(queue):
            j = queue[qi]
            qi += 1
            if labels[j] == -1:
                labels[j] = cluster  # border point claimed by this cluster
            if labels[j] != UNVISITED:
                continue
            labels[j] = cluster
            jn = region(j)
            if len(jn) >= min_pts:
                queue.extend(m for m in jn.tolist() if labels[m] == UNVISITED or labels[m] == -1)
        cluster += 1
    labels[labels == UNVISITED] = -1
    return _relabel_by_first_member(labels)


def mean_shift(embeddings, bandwidth, max_iter=300):
    """Flat-kernel mode seeking: each point iterates to the mean of the
    original points within bandwidth of it until the shift is below
    1e-4 * bandwidth, then modes closer than bandwidth/2 merge."""
    if bandwidth <= 0:
        raise InvalidArgumentError("bandwidth must be positive")
    e = _as_matrix(embeddings)
    n = e.shape[0]
    modes = e.copy()
    tol = 1e-4 * bandwidth
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        # window means against the original data, blocked to bound memory
        for start in range(0, len(idx), 512):
            block = idx[start : start + 512]
            d2 = np.sum((modes[block, None, :] - e[None, :, :]) ** 2, axis=2)
            within = d2 <= bandwidth * bandwidth
            counts = within.sum(axis=1)
            means = (within.astype(float) @ e) / counts[:, None]
            shift = np.linalg.norm(means - modes[block], axis=1)
            modes[block] = means
            active[block[shift < tol]] = False
    # merge converged modes in point order: a mode within bandwidth/2 of an
    # already-kept center is absorbed by it
    centers = []
    for i in range(n):
        if not any(np.linalg.norm(modes[i] - c) < bandwidth / 2.0 for c in centers):
            centers.append(modes[i])
    centers = np.asarray(centers)
    d2 = np.sum((modes[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assignment = d2.argmin(axis=1)  # ties resolve to the lowest center id
    return _relabel_by_first_member(assignment)


def radius_linkage(embeddings, radius):
    """Connected components of the <= radius proximity graph (no noise)."""
    if radius <= 0:
        raise InvalidArgumentError("radius must be positive")
    e = _as_matrix(embeddings)
    n = e.shape[0]
    tree = KdTree(e)
    labels = np.full(n, -1, dtype=np.int64)
    component = 0
    for i in range(n):
        if labels[i] >= 0:
            continue
        labels[i] = component
        stack = [i]
        while stack:
            j = stack.pop()
            for m in tree.query_radius(e[j], radius).tolist():
                if labels[m] < 0:
                    labels[m] = component
                    stack.append(m)
        component += 1
    return _relabel_by_first_member(labels)


def adjusted_rand_index(pred, truth):
    """Chance-corrected partition agreement in [-1, 1].

    pred may be an InstanceSegmentation or a label vector; noise points
    (-1) are treated as singleton clusters. Combinatorial sums use exact
    integer arithmetic, so identical partitions score exactly 1.0.
    """
    pred_labels = pred.labels if isinstance(pred, InstanceSegmentation) else np.asarray(pred)
    truth = np.asarray(truth)
    if pred_labels.shape != truth.shape or pred_labels.ndim != 1:
        raise InvalidArgumentError("pred and truth must be equal-length label vectors")
    pred_labels = pred_labels.copy()
    noise = pred_labels < 0
    if noise.any():
        fresh = pred_labels.max(initial=-1) + 1
        pred_labels[noise] = np.arange(fresh, fresh + noise.sum())
    n = len(pred_labels)

    def comb2(x):
        return x * (x - 1) // 2

    _, pred_ids = np.unique(pred_labels, return_inverse=True)
    _, truth_ids = np.unique(truth, return_inverse=True)
    contingency = {}
    for p, t in zip(pred_ids.tolist(), truth_ids.tolist()):
        contingency[(p, t)] = contingency.get((p, t), 0) + 1
    sum_cells = sum(comb2(c) for c in contingency.values())
    a_sum = sum(comb2(int(c)) for c in np.bincount(pred_ids))
    b_sum = sum(comb2(int(c)) for c in np.bincount(truth_ids))
    total = comb2(n)
    if total == 0:
        return 1.0
    # scale numerator and denominator by 2 * C(n, 2) to stay in exact ints
    num = 2 * sum_cells * total - 2 * a_sum * b_sum
    den = (a_sum + b_sum) * total - 2 * a_sum * b_sum
    if den == 0:
        return 1.0  # both partitions trivial: identical pair structure
    return num / den
