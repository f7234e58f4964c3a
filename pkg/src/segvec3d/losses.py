"""Pull-push contrastive loss over point pairs, and pair sampling from weak
instance labels.

The loss attracts same-instance pairs via squared distance and repels
different-instance pairs that sit closer than the margin via a squared
hinge. Pairs come from whatever weak grouping signal is available; here
that is a label vector with -1 marking unlabeled points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSupervisionError, InvalidArgumentError

__all__ = ["PairSet", "sample_pairs", "contrastive_loss"]


@dataclass
class PairSet:
    """Positive (same instance) and negative (different instance) index
    pairs with the repulsion margin."""

    positives: np.ndarray  # (P, 2) int
    negatives: np.ndarray  # (Q, 2) int
    margin: float

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.int64).reshape(-1, 2)
        self.negatives = np.asarray(self.negatives, dtype=np.int64).reshape(-1, 2)
        if self.margin <= 0:
            raise InvalidArgumentError("margin must be positive")
        for pairs in (self.positives, self.negatives):
            if pairs.size and (pairs[:, 0] == pairs[:, 1]).any():
                raise InvalidArgumentError("pairs must join distinct indices")


def _all_pairs(indices):
    idx = np.asarray(indices)
    a, b = np.triu_indices(len(idx), k=1)
    return np.stack([idx[a], idx[b]], axis=1)


def sample_pairs(weak_groups, budget, seed, margin=1.0):
    """Draw up to `budget` positive and `budget` negative pairs uniformly.

    weak_groups is an N-vector of integer labels with -1 = unknown;
    unlabeled points never appear in a pair. When the total number of valid
    pairs of a kind is within budget, all of them are returned (in
    ascending (i, j) order); otherwise distinct pairs are sampled uniformly
    with the seeded generator.
    """
    labels = np.asarray(weak_groups, dtype=np.int64)
    if labels.ndim != 1:
        raise InvalidArgumentError("weak_groups must be a 1-D label vector")
    if budget < 1:
        raise InvalidArgumentError("budget must be positive")
    labeled = np.flatnonzero(labels >= 0)
    groups = {}
    for i in labeled.tolist():
        groups.setdefault(int(labels[i]), []).append(i)
    sizes = {g: len(m) for g, m in groups.items()}
    total_pos = sum(s * (s - 1) // 2 for s in sizes.values())
    m_total = len(labeled)
    total_neg = (m_total * m_total - sum(s * s for s in sizes.values())) // 2
    if total_pos == 0 or total_neg == 0:
        raise DegenerateSupervisionError(
            "need at least one same-label pair and one cross-label pair"
        )
    rng = np.random.default_rng(seed)
    if total_pos <= budget:
        chunks = [_all_pairs(m) for m in groups.values() if len(m) >= 2]
        positives = np.concatenate(chunks, axis=0)
        order = np.lexsort((positives[:, 1], positives[:, 0]))
        positives = positives[order]
    else:
        positives = _sample_positive_pairs(rng, groups, budget)
    if total_neg <= budget:
        la, lb = np.meshgrid(labeled, labeled, indexing="ij")
        mask = (labels[la] != labels[lb]) & (la < lb)
        negatives = np.stack([la[mask], lb[mask]], axis=1)
        order = np.lexsort((negatives[:, 1], negatives[:, 0]))
        negatives = negatives[order]
    else:
        negatives = _sample_negative_pairs(rng, labels, labeled, budget)
    return PairSet(positives=positives, negatives=negatives, margin=margin)


def _sample_positive_pairs(rng, groups, budget):
    """Uniform over same-label pairs: pick a group proportional to its pair
    count, then a uniform distinct pair inside it."""
    members = [np.asarray(groups[g]) for g in sorted(groups) if len(groups[g]) >= 2]
    weights = np.array([len(m) * (len(m) - 1) / 2.0 for m in members])
    probs = weights / weights.sum()
    chosen = set()
    while len(chosen) < budget:
        gids = rng.choice(len(members), size=2 * budget, p=probs)
        for gid in gids.tolist():
            grp = members[gid]
            ng = len(grp)
            r1 = int(rng.integers(ng))
            r2 = int(rng.integers(ng - 1))
            if r2 >= r1:
                r2 += 1
            a, b = int(grp[r1]), int(grp[r2])
            chosen.add((a, b) if a < b else (b, a))
            if len(chosen) == budget:
                break
    return np.array(sorted(chosen), dtype=np.int64)


def _sample_negative_pairs(rng, labels, labeled, budget):
    """Uniform over cross-label pairs via rejection on ordered draws."""
    m_total = len(labeled)
    chosen = set()
    while len(chosen) < budget:
        draw = labeled[rng.integers(0, m_total, size=(4 * budget, 2))]
        ok = labels[draw[:, 0]] != labels[draw[:, 1]]
        for a, b in draw[ok].tolist():
            chosen.add((a, b) if a < b else (b, a))
            if len(chosen) == budget:
                break
    return np.array(sorted(chosen), dtype=np.int64)


def contrastive_loss(embeddings, pairs, normalize=True):
    """Pull-push loss and its gradient w.r.t. the embeddings.

    loss = sum_{(i,j) in S} ||e_i - e_j||^2
         + sum_{(i,j) in D} max(0, m - ||e_i - e_j||)^2

    With normalize=True (the training default) both the loss and gradient
    are divided by |S| + |D| so the step size does not scale with budget.
    The hinge gradient is zero at and beyond the margin, and defined as
    zero for a negative pair at exactly distance zero.
    """
    e = np.asarray(embeddings, dtype=float)
    if e.ndim != 2:
        raise InvalidArgumentError("embeddings must be (N, d)")
    n = e.shape[0]
    for arr in (pairs.positives, pairs.negatives):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise InvalidArgumentError("pair index out of range")
    grads = np.zeros_like(e)
    loss = 0.0
    if len(pairs.positives):
        pi, pj = pairs.positives[:, 0], pairs.positives[:, 1]
        diff = e[pi] - e[pj]
        loss += float(np.sum(diff * diff))
        np.add.at(grads, pi, 2.0 * diff)
        np.add.at(grads, pj, -2.0 * diff)
    if len(pairs.negatives):
        ni, nj = pairs.negatives[:, 0], pairs.negatives[:, 1]
        diff = e[ni] - e[nj]
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        violation = pairs.margin - dist
        active = (violation > 0.0) & (dist > 0.0)
        loss += float(np.sum(np.maximum(violation, 0.0) ** 2))
        if active.any():
            coef = -2.0 * violation[active] / dist[active]
            contrib = coef[:, None] * diff[active]
            np.add.at(grads, ni[active], contrib)
            np.add.at(grads, nj[active], -contrib)
    if normalize:
        count = len(pairs.positives) + len(pairs.negatives)
        if count:
            loss /= count
            grads /= count
    return loss, grads
