"""Shared 3D-text embedding space: instance pooling, projections, symmetric
InfoNCE, zero-shot labeling, and text-query retrieval.

The text side is pure data: phrases resolve through an embedding table
file, with a deterministic hashed-token fallback for phrases the table does
not know. Both routes yield unit vectors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    DegenerateEmbeddingError,
    DegenerateInstanceError,
    InvalidArgumentError,
)

__all__ = [
    "InstanceDescriptor",
    "TextEmbeddingTable",
    "JointSpaceModel",
    "pool_instance",
    "project_3d",
    "project_text",
    "encode_text",
    "infonce_loss",
    "zero_shot_label",
    "retrieve",
]

_TABLE_HEADER_PREFIX = "segvec3d-textemb v1 dim="
_ZERO_NORM = 1e-12


def normalize_phrase(phrase):
    return phrase.strip().lower()


@dataclass
class InstanceDescriptor:
    """Unit-normalized mean of an instance's fused point features."""

    u: np.ndarray
    member_indices: np.ndarray
    source_scene: str = ""

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.member_indices = np.asarray(self.member_indices, dtype=np.int64)
        if self.member_indices.size == 0:
            raise InvalidArgumentError("an instance needs at least one member point")
        if abs(np.linalg.norm(self.u) - 1.0) > 1e-9:
            raise InvalidArgumentError("descriptor must be unit length")


@dataclass
class TextEmbeddingTable:
    """Phrase -> vector map with a fixed dimension; phrases are stored
    lowercased and trimmed."""

    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidArgumentError("dimension must be positive")
        clean = {}
        for phrase, vec in self.entries.items():
            key = normalize_phrase(phrase)
            vec = np.asarray(vec, dtype=float)
            if vec.shape != (self.dim,):
                raise InvalidArgumentError(
                    f"vector for {phrase!r} has shape {vec.shape}, expected ({self.dim},)"
                )
            if not np.isfinite(vec).all():
                raise DataError(f"non-finite embedding for {phrase!r}")
            if key in clean:
                raise InvalidArgumentError(f"duplicate phrase {phrase!r}")
            clean[key] = vec
        self.entries = clean

    def save(self, path):
        lines = [f"{_TABLE_HEADER_PREFIX}{self.dim}"]
        for phrase, vec in self.entries.items():
            if '"' in phrase or "\t" in phrase or "\n" in phrase:
                raise InvalidArgumentError(f"phrase {phrase!r} cannot be serialized")
            values = " ".join(repr(float(v)) for v in vec)
            lines.append(f'"{phrase}"\t{values}')
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read().splitlines()
        if not raw or not raw[0].startswith(_TABLE_HEADER_PREFIX):
            raise DataError(
                f"expected header starting with {_TABLE_HEADER_PREFIX!r}", line=1
            )
        try:
            dim = int(raw[0][len(_TABLE_HEADER_PREFIX):])
        except ValueError:
            raise DataError("cannot parse table dimension", line=1) from None
        entries = {}
        for ln, line in enumerate(raw[1:], start=2):
            if not line.strip():
                continue
            if not line.startswith('"'):
                raise DataError("entry must start with a quoted phrase", line=ln)
            close = line.find('"', 1)
            if close < 0 or close + 1 >= len(line) or line[close + 1] != "\t":
                raise DataError("expected '\"phrase\"<TAB>values'", line=ln)
            phrase = normalize_phrase(line[1:close])
            if not phrase:
                raise DataError("empty phrase", line=ln)
            if phrase in entries:
                raise DataError(f"duplicate phrase {phrase!r}", line=ln)
            try:
                vec = np.array([float(t) for t in line[close + 2 :].split()])
            except ValueError:
                raise DataError("cannot parse embedding values", line=ln) from None
            if vec.shape != (dim,):
                raise DataError(
                    f"expected {dim} values, got {vec.size}", line=ln
                )
            if not np.isfinite(vec).all():
                raise DataError("non-finite embedding value", line=ln)
            entries[phrase] = vec
        return cls(dim=dim, entries=entries)


@dataclass
class JointSpaceModel:
    """Linear projections from instance- and text-feature space into the
    shared joint space, plus the InfoNCE temperature."""

    w_3d: np.ndarray
    w_txt: np.ndarray
    tau: float

    def __post_init__(self):
        self.w_3d = np.asarray(self.w_3d, dtype=float)
        self.w_txt = np.asarray(self.w_txt, dtype=float)
        if self.w_3d.ndim != 2 or self.w_txt.ndim != 2:
            raise InvalidArgumentError("projection matrices must be 2-D")
        if self.w_3d.shape[0] != self.w_txt.shape[0]:
            raise InvalidArgumentError("projections must share the joint dimension")
        if not (np.isfinite(self.w_3d).all() and np.isfinite(self.w_txt).all()):
            raise DataError("projection matrices contain non-finite values")
        if self.tau <= 0:
            raise InvalidArgumentError("temperature must be positive")

    @property
    def joint_dim(self):
        return self.w_3d.shape[0]


def pool_instance(point_field, members, source_scene=""):
    """Mean of the instance's final point features, unit-normalized."""
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise InvalidArgumentError("member list is empty")
    final = point_field.final
    if members.min() < 0 or members.max() >= final.shape[0]:
        raise InvalidArgumentError("member index out of range")
    mean = final[members].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < _ZERO_NORM:
        raise DegenerateInstanceError("instance pooled to a zero vector")
    return InstanceDescriptor(
        u=mean / norm, member_indices=members, source_scene=source_scene
    )


def project_3d(desc, model):
    """v_X = W_3D u_X (not re-normalized; cosine handles scale later)."""
    if model.w_3d.shape[1] != desc.u.shape[0]:
        raise InvalidArgumentError("descriptor dim does not match W_3D")
    return model.w_3d @ desc.u


def project_text(t, model):
    """v_T = W_txt t."""
    t = np.asarray(t, dtype=float)
    if model.w_txt.shape[1] != t.shape[0]:
        raise InvalidArgumentError("text vector dim does not match W_txt")
    return model.w_txt @ t


def _token_vector(token, dim):
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def encode_text(phrase, table):
    """Unit text vector for a phrase: table lookup, else the hash encoder
    (mean of per-token seeded gaussian directions, re-normalized)."""
    key = normalize_phrase(phrase)
    if not key:
        raise InvalidArgumentError("phrase is empty")
    hit = table.entries.get(key)
    if hit is not None:
        norm = np.linalg.norm(hit)
        if norm < _ZERO_NORM:
            raise DegenerateEmbeddingError(f"table vector for {key!r} is zero")
        return hit / norm
    tokens = key.split()
    mean = np.mean([_token_vector(t, table.dim) for t in tokens], axis=0)
    norm = np.linalg.norm(mean)
    if norm < _ZERO_NORM:
        raise DegenerateEmbeddingError(f"hash encoding collapsed for {key!r}")
    return mean / norm


def _unit_rows(mat, what):
    norms = np.linalg.norm(mat, axis=1)
    if (norms < _ZERO_NORM).any():
        raise DegenerateEmbeddingError(f"zero vector in {what}")
    return mat / norms[:, None], norms


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def infonce_loss(v_x, v_t, tau):
    """Symmetric InfoNCE over a batch of paired projections.

    Row i of v_t is the positive for row i of v_x; all other in-batch
    pairings are negatives. Returns (loss, grad_v_x, grad_v_t); gradients
    are with respect to the raw (pre-normalization) vectors.
    """
    v_x = np.asarray(v_x, dtype=float)
    v_t = np.asarray(v_t, dtype=float)
    if v_x.ndim != 2 or v_x.shape != v_t.shape:
        raise InvalidArgumentError("batches must be equal-shape (B, d) matrices")
    b = v_x.shape[0]
    if b < 2:
        raise InvalidArgumentError("InfoNCE needs a batch of at least 2")
    if tau <= 0:
        raise InvalidArgumentError("temperature must be positive")
    x, nx = _unit_rows(v_x, "3D batch")
    t, nt = _unit_rows(v_t, "text batch")
    sims = (x @ t.T) / tau
    diag = np.diag(sims)
    loss_rows = float(np.mean(_logsumexp(sims, axis=1) - diag))
    loss_cols = float(np.mean(_logsumexp(sims, axis=0) - diag))
    loss = 0.5 * (loss_rows + loss_cols)
    p_rows = np.exp(sims - _logsumexp(sims, axis=1)[:, None])
    p_cols = np.exp(sims - _logsumexp(sims, axis=0)[None, :])
    eye = np.eye(b)
    dsims = ((p_rows - eye) + (p_cols - eye)) / (2.0 * b)
    dx = (dsims @ t) / tau
    dt = (dsims.T @ x) / tau
    # through the row normalization: d/dv of v/|v| applied to each row
    grad_x = (dx - x * np.sum(x * dx, axis=1, keepdims=True)) / nx[:, None]
    grad_t = (dt - t * np.sum(t * dt, axis=1, keepdims=True)) / nt[:, None]
    return loss, grad_x, grad_t


def _cosine(a, b, what):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise DegenerateEmbeddingError(f"zero vector in {what}")
    return float(a @ b / (na * nb))


def zero_shot_label(desc, candidates, model, table):
    """Name an instance: cosine against each candidate phrase's projection,
    highest wins (ties go to the earlier candidate).

    Returns (best phrase, score vector over candidates)."""
    if not candidates:
        raise InvalidArgumentError("candidate list is empty")
    v_x = project_3d(desc, model)
    scores = np.array(
        [
            _cosine(v_x, project_text(encode_text(c, table), model), f"candidate {c!r}")
            for c in candidates
        ]
    )
    return candidates[int(np.argmax(scores))], scores


def retrieve(query, descs, model, table):
    """Rank instances by cosine similarity to a text query.

    Returns a list of (instance index, score) sorted by descending score;
    the sort is stable, so equal scores keep input order."""
    if not descs:
        raise InvalidArgumentError("no instances to search")
    v_q = project_text(encode_text(query, table), model)
    scores = np.array(
        [_cosine(project_3d(d, model), v_q, "instance projection") for d in descs]
    )
    order = np.argsort(-scores, kind="stable")
    return [(int(i), float(scores[i])) for i in order]
