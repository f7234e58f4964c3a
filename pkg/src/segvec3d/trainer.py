"""Training procedures, checkpoint serialization, and the gradient-check
suite.

Phase 1 trains the segmentation network with the pull-push loss on pairs
sampled from label-fraction-subsampled ground truth. Phase 2 freezes the
backbone (unless fine_tune_backbone is set) and trains the 3D/text
projections with symmetric InfoNCE against a frozen text-embedding table.

Both phases are pure functions of (config, data, seed): identical inputs
give byte-identical checkpoints.
"""

from __future__ import annotations

import copy
import math
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import (
    DataError,
    InsufficientPairingError,
    InvalidArgumentError,
    TrainingDivergedError,
    UnsupportedVersionError,
)
from .losses import PairSet, contrastive_loss, sample_pairs
from .multimodal import JointSpaceModel, encode_text, infonce_loss, pool_instance
from .nnkit import OptimizerState, adam_step, finite_difference_check, global_norm_clip, init_mlp, mlp_backward, mlp_forward
from .segnet import (
    AttentionLayerParams,
    SegNetConfig,
    SegNetParams,
    attention_layer,
    attention_layer_backward,
    backward_full,
    forward_full,
)
from .geometry import PointCloud, build_knn_graph

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "train_segnet",
    "train_alignment",
    "save_checkpoint",
    "load_checkpoint",
    "subsample_weak_labels",
    "gradient_check_suite",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
_MAGIC = b"SGV3"


@dataclass
class TrainConfig:
    """Every knob for both training phases, readable from a flat
    ``key = value`` config file with each key overridable by a CLI flag."""

    # architecture
    k: int = 16
    num_layers: int = 3
    width: int = 32
    attn_dim: int = 16
    fused_dim: int = 64
    global_dim: int = 32
    embed_dim: int = 16
    recompute_neighbors: bool = False
    use_colors: bool = False
    # phase 1: instance embedding
    margin: float = 1.0
    pair_budget: int = 1024
    label_fraction: float = 0.05
    learning_rate: float = 1e-3
    epochs: int = 60
    batch_scenes: int = 1
    grad_clip: float = 10.0
    # phase 2: cross-modal alignment
    tau: float = 0.07
    joint_dim: int = 32
    align_epochs: int = 40
    align_batch: int = 8
    fine_tune_backbone: bool = False
    seed: int = 0

    def __post_init__(self):
        positive = [
            "k", "num_layers", "width", "attn_dim", "fused_dim", "global_dim",
            "embed_dim", "margin", "pair_budget", "learning_rate", "epochs",
            "batch_scenes", "grad_clip", "tau", "joint_dim", "align_epochs",
            "align_batch",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not 0.0 < self.label_fraction <= 1.0:
            raise InvalidArgumentError("label_fraction must be in (0, 1]")

    def segnet_config(self):
        return SegNetConfig(
            k=self.k,
            num_layers=self.num_layers,
            width=self.width,
            attn_dim=self.attn_dim,
            fused_dim=self.fused_dim,
            global_dim=self.global_dim,
            embed_dim=self.embed_dim,
            recompute_neighbors=self.recompute_neighbors,
            use_colors=self.use_colors,
        )

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        defaults = cls()
        kwargs = {}
        known = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        for ln, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DataError("expected 'key = value'", line=ln)
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in known:
                raise DataError(f"unknown config key {key!r}", line=ln)
            try:
                kwargs[key] = _parse_config_value(known[key], raw)
            except ValueError:
                raise DataError(f"bad value {raw!r} for {key}", line=ln) from None
        return cls(**kwargs)


def _parse_config_value(default, raw):
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(raw)
    if isinstance(default, int):
        return int(raw)
    return float(raw)


@dataclass
class Checkpoint:
    """Trained parameters plus config and metric history."""

    config: TrainConfig
    segnet: SegNetParams
    joint: JointSpaceModel | None = None
    seg_history: list = field(default_factory=list)  # (step, loss)
    align_history: list = field(default_factory=list)


def subsample_weak_labels(labels, fraction, rng):
    """Keep a seeded `fraction` of ground-truth labels, hiding the rest
    behind -1 (the weak-supervision regime)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    count = min(n, max(2, int(round(fraction * n))))
    chosen = rng.choice(n, size=count, replace=False)
    weak = np.full(n, -1, dtype=np.int64)
    weak[chosen] = labels[chosen]
    return weak


def _snapshot(config, params, seg_history, joint=None, align_history=()):
    return Checkpoint(
        config=config,
        segnet=copy.deepcopy(params),
        joint=copy.deepcopy(joint),
        seg_history=list(seg_history),
        align_history=list(align_history),
    )


def train_segnet(config, train_scenes):
    """Phase 1: fit the per-point embedding space with the pull-push loss.

    Per scene and step: forward pass, pair sampling from the subsampled
    weak labels, contrastive loss, backprop, gradient clipping, Adam.
    Raises TrainingDivergedError (carrying the last good checkpoint) if the
    loss goes non-finite.
    """
    if not train_scenes:
        raise InvalidArgumentError("no training scenes")
    for scene in train_scenes:
        if scene.instance_labels is None:
            raise InvalidArgumentError("training scenes need instance labels")
    seg_cfg = config.segnet_config()
    params = SegNetParams.init(seg_cfg, np.random.default_rng([config.seed, 0]))
    pdict = params.named_params()
    state = OptimizerState.for_params(pdict, learning_rate=config.learning_rate)
    weak = [
        subsample_weak_labels(
            scene.instance_labels, config.label_fraction, np.random.default_rng([config.seed, 1, i])
        )
        for i, scene in enumerate(train_scenes)
    ]
    graphs = [build_knn_graph(scene, seg_cfg.k) for scene in train_scenes]
    history = []
    step = 0
    last_good = _snapshot(config, params, history)
    batch = max(1, config.batch_scenes)
    for epoch in range(config.epochs):
        for start in range(0, len(train_scenes), batch):
            scene_ids = range(start, min(start + batch, len(train_scenes)))
            acc = {name: np.zeros_like(p) for name, p in pdict.items()}
            batch_loss = 0.0
            for si in scene_ids:
                _, embeddings, cache = forward_full(
                    train_scenes[si], params, graph=graphs[si]
                )
                pairs = sample_pairs(
                    weak[si],
                    config.pair_budget,
                    seed=[config.seed, 2, epoch, si],
                    margin=config.margin,
                )
                loss, dembed = contrastive_loss(embeddings, pairs, normalize=True)
                grads = backward_full(params, cache, dembed)
                for name in acc:
                    acc[name] += grads[name]
                batch_loss += loss
            n_in_batch = len(scene_ids)
            batch_loss /= n_in_batch
            for name in acc:
                acc[name] /= n_in_batch
            norm = global_norm_clip(acc, config.grad_clip)
            if not (math.isfinite(batch_loss) and math.isfinite(norm)):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}", checkpoint=last_good
                )
            last_good = _snapshot(config, params, history)
            adam_step(pdict, acc, state)
            step += 1
            history.append((step, batch_loss))
    return Checkpoint(config=config, segnet=params, seg_history=history)


def _instance_pool(scenes, params, graphs=None):
    """(descriptor, phrase, scene index, members) for every named ground
    truth instance across the scenes."""
    pool = []
    fields_cache = []
    for si, scene in enumerate(scenes):
        graph = graphs[si] if graphs is not None else None
        point_field, _, cache = forward_full(scene, params, graph=graph)
        fields_cache.append((point_field, cache))
        names = scene.category_names or {}
        for inst_id in sorted(names):
            members = np.flatnonzero(scene.instance_labels == inst_id)
            if members.size == 0:
                continue
            desc = pool_instance(point_field, members, source_scene=str(si))
            pool.append((desc, names[inst_id], si, members))
    return pool, fields_cache


def _pool_backward(point_field, members, du):
    """Gradient of the unit-normalized member mean w.r.t. final features."""
    mean = point_field.final[members].mean(axis=0)
    norm = np.linalg.norm(mean)
    u = mean / norm
    dmean = (du - u * float(u @ du)) / norm
    dfinal = np.zeros_like(point_field.final)
    dfinal[members] = dmean / members.size
    return dfinal


_FINE_TUNE_PREFIXES = ("fusion.", "global.", "fuse.")


def train_alignment(config, checkpoint, train_scenes, table):
    """Phase 2: align instance descriptors with category phrases.

    Trains W_3D and W_txt by symmetric InfoNCE over batches of distinct
    categories; the text table is read-only. With fine_tune_backbone the
    post-attention heads (fusion/global/fuse) train too, and descriptors
    are recomputed as the backbone moves.
    """
    for scene in train_scenes:
        if not scene.category_names:
            raise InvalidArgumentError("alignment scenes need category names")
    params = checkpoint.segnet
    seg_cfg = params.config
    d_f, d_t, d_v = seg_cfg.fused_dim, table.dim, config.joint_dim
    rng = np.random.default_rng([config.seed, 3])
    bound3 = np.sqrt(6.0 / (d_v + d_f))
    boundt = np.sqrt(6.0 / (d_v + d_t))
    w_3d = rng.uniform(-bound3, bound3, size=(d_v, d_f))
    w_txt = rng.uniform(-boundt, boundt, size=(d_v, d_t))
    graphs = [build_knn_graph(scene, seg_cfg.k) for scene in train_scenes]
    pool, fields_cache = _instance_pool(train_scenes, params, graphs)
    phrases = sorted({entry[1] for entry in pool})
    if len(phrases) < 2:
        raise InsufficientPairingError("need at least two distinct categories")
    by_phrase = {p: [i for i, e in enumerate(pool) if e[1] == p] for p in phrases}
    text_vectors = {p: encode_text(p, table) for p in phrases}
    pdict = {"w_3d": w_3d, "w_txt": w_txt}
    seg_pdict = params.named_params()
    if config.fine_tune_backbone:
        for name, arr in seg_pdict.items():
            if name.startswith(_FINE_TUNE_PREFIXES):
                pdict[name] = arr
    state = OptimizerState.for_params(pdict, learning_rate=config.learning_rate)
    b_eff = min(config.align_batch, len(phrases))
    history = []
    step = 0
    steps_per_epoch = max(1, math.ceil(len(pool) / b_eff))
    for epoch in range(config.align_epochs):
        for sub in range(steps_per_epoch):
            step_rng = np.random.default_rng([config.seed, 4, epoch, sub])
            picked_phrases = [
                phrases[i]
                for i in step_rng.choice(len(phrases), size=b_eff, replace=False)
            ]
            entries = [
                pool[by_phrase[p][int(step_rng.integers(len(by_phrase[p])))]]
                for p in picked_phrases
            ]
            if config.fine_tune_backbone:
                # descriptors move with the backbone: recompute the touched
                # scenes' forward passes this step
                scene_ids = sorted({e[2] for e in entries})
                for si in scene_ids:
                    point_field, _, cache = forward_full(
                        train_scenes[si], params, graph=graphs[si]
                    )
                    fields_cache[si] = (point_field, cache)
                entries = [
                    (
                        pool_instance(fields_cache[si][0], members, str(si)),
                        phrase,
                        si,
                        members,
                    )
                    for (_, phrase, si, members) in entries
                ]
            u_batch = np.stack([e[0].u for e in entries])
            t_batch = np.stack([text_vectors[p] for p in picked_phrases])
            v_x = u_batch @ w_3d.T
            v_t = t_batch @ w_txt.T
            loss, dv_x, dv_t = infonce_loss(v_x, v_t, config.tau)
            grads = {"w_3d": dv_x.T @ u_batch, "w_txt": dv_t.T @ t_batch}
            if config.fine_tune_backbone:
                du_batch = dv_x @ w_3d
                per_scene_final_grad = {}
                for (desc, _, si, members), du in zip(entries, du_batch):
                    dfinal = _pool_backward(fields_cache[si][0], members, du)
                    per_scene_final_grad[si] = per_scene_final_grad.get(si, 0.0) + dfinal
                for name in seg_pdict:
                    if name.startswith(_FINE_TUNE_PREFIXES):
                        grads[name] = np.zeros_like(seg_pdict[name])
                for si, dfinal in per_scene_final_grad.items():
                    zero_emb = np.zeros((dfinal.shape[0], seg_cfg.embed_dim))
                    seg_grads = backward_full(
                        params, fields_cache[si][1], zero_emb, grad_final=dfinal
                    )
                    for name in grads:
                        if name.startswith(_FINE_TUNE_PREFIXES):
                            grads[name] += seg_grads[name]
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite alignment loss at step {step}")
            global_norm_clip(grads, config.grad_clip)
            adam_step(pdict, grads, state)
            step += 1
            history.append((step, loss))
    joint = JointSpaceModel(w_3d=w_3d, w_txt=w_txt, tau=config.tau)
    return Checkpoint(
        config=config,
        segnet=params,
        joint=joint,
        seg_history=list(checkpoint.seg_history),
        align_history=history,
    )


# ---------------------------------------------------------------------------
# Checkpoint serialization: magic SGV3, u16 version, length-prefixed sections
# ---------------------------------------------------------------------------


def _pack_array_table(arrays):
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise DataError(f"truncated while reading {what}", offset=self.pos)
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _unpack_array_table(blob, what):
    reader = _Reader(blob)
    (count,) = reader.unpack("<I", f"{what} count")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", f"{what} name length")
        name = reader.take(name_len, f"{what} name").decode("utf-8")
        (ndim,) = reader.unpack("<B", f"{what} ndim")
        shape = reader.unpack(f"<{ndim}I", f"{what} shape") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        data = reader.take(8 * size, f"{what} array {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    if reader.pos != len(blob):
        raise DataError(f"trailing bytes in {what}", offset=reader.pos)
    return arrays


def _history_to_csv(history):
    lines = ["step,loss"]
    lines += [f"{step},{repr(float(loss))}" for step, loss in history]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _history_from_csv(blob, what):
    text = blob.decode("utf-8").splitlines()
    if not text or text[0] != "step,loss":
        raise DataError(f"bad {what} header")
    out = []
    for line in text[1:]:
        if not line.strip():
            continue
        step_text, _, loss_text = line.partition(",")
        out.append((int(step_text), float(loss_text)))
    return out


def save_checkpoint(ckpt, path):
    """Serialize a checkpoint; the round trip is bit-exact."""
    sections = [
        ("config", ckpt.config.to_text().encode("utf-8")),
        ("segnet", _pack_array_table(ckpt.segnet.named_params())),
        ("seg_history", _history_to_csv(ckpt.seg_history)),
    ]
    if ckpt.joint is not None:
        joint_arrays = {
            "w_3d": ckpt.joint.w_3d,
            "w_txt": ckpt.joint.w_txt,
            "tau": np.array(ckpt.joint.tau),
        }
        sections.append(("joint", _pack_array_table(joint_arrays)))
        sections.append(("align_history", _history_to_csv(ckpt.align_history)))
    out = [_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<H", len(sections))]
    for name, payload in sections:
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    blob = b"".join(out)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Parse a checkpoint file; corrupt input raises DataError with the
    byte offset and an unknown version raises UnsupportedVersionError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    magic = reader.take(4, "magic")
    if magic != _MAGIC:
        raise DataError(f"bad magic {magic!r}", offset=0)
    (version,) = reader.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    (n_sections,) = reader.unpack("<H", "section count")
    sections = {}
    for _ in range(n_sections):
        (name_len,) = reader.unpack("<H", "section name length")
        name = reader.take(name_len, "section name").decode("utf-8")
        (payload_len,) = reader.unpack("<Q", "section length")
        sections[name] = reader.take(payload_len, f"section {name!r}")
    if reader.pos != len(blob):
        raise DataError("trailing bytes after sections", offset=reader.pos)
    for required in ("config", "segnet", "seg_history"):
        if required not in sections:
            raise DataError(f"missing section {required!r}")
    config = TrainConfig.from_text(sections["config"].decode("utf-8"))
    arrays = _unpack_array_table(sections["segnet"], "segnet")
    params = SegNetParams.init(config.segnet_config(), np.random.default_rng(0))
    template = params.named_params()
    if set(template) != set(arrays):
        raise DataError("segnet parameter names do not match the config")
    for name, arr in template.items():
        if arrays[name].shape != arr.shape:
            raise DataError(
                f"parameter {name!r} has shape {arrays[name].shape}, expected {arr.shape}"
            )
        arr[...] = arrays[name]
    joint = None
    align_history = []
    if "joint" in sections:
        joint_arrays = _unpack_array_table(sections["joint"], "joint")
        for needed in ("w_3d", "w_txt", "tau"):
            if needed not in joint_arrays:
                raise DataError(f"joint section missing {needed!r}")
        joint = JointSpaceModel(
            w_3d=joint_arrays["w_3d"],
            w_txt=joint_arrays["w_txt"],
            tau=float(joint_arrays["tau"]),
        )
        align_history = _history_from_csv(sections.get("align_history", b"step,loss\n"), "align history")
    seg_history = _history_from_csv(sections["seg_history"], "seg history")
    return Checkpoint(
        config=config,
        segnet=params,
        joint=joint,
        seg_history=seg_history,
        align_history=align_history,
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient-check suite (also behind the gradcheck command)
# ---------------------------------------------------------------------------


def _check_mlp(seed):
    rng = np.random.default_rng(seed)
    mlp = init_mlp(rng, [5, 7, 6, 3])
    x = rng.standard_normal((4, 5))
    c = rng.standard_normal((4, 3))

    params = dict(mlp.named_arrays("mlp"))
    params["x"] = x

    def loss_fn():
        y, _ = mlp_forward(mlp, x)
        return 0.5 * float(np.sum(c * y * y))

    y, cache = mlp_forward(mlp, x)
    layer_grads, dx = mlp_backward(mlp, cache, c * y)
    analytic = {}
    for i, (dw, db) in enumerate(layer_grads):
        analytic[f"mlp.{i}.w"] = dw
        analytic[f"mlp.{i}.b"] = db
    analytic["x"] = dx
    return finite_difference_check(loss_fn, params, analytic)


def _check_attention_layer(seed):
    rng = np.random.default_rng(seed)
    n, k, d, a = 10, 3, 5, 4
    points = rng.standard_normal((n, 3))
    cloud = PointCloud(positions=points)
    graph = build_knn_graph(cloud, k)
    layer = AttentionLayerParams(
        phi=init_mlp(rng, [d, a]), psi=init_mlp(rng, [d, a]), gamma=init_mlp(rng, [d, d])
    )
    features = rng.standard_normal((n, d))
    c = rng.standard_normal((n, d))

    params = dict(layer.phi.named_arrays("phi"))
    params.update(layer.psi.named_arrays("psi"))
    params.update(layer.gamma.named_arrays("gamma"))
    params["features"] = features

    def loss_fn():
        h, _ = attention_layer(features, graph, layer)
        return 0.5 * float(np.sum(c * h * h))

    h, cache = attention_layer(features, graph, layer)
    (phi_g, psi_g, gamma_g), dfeat = attention_layer_backward(layer, cache, c * h)
    analytic = {"features": dfeat}
    for prefix, grads in (("phi", phi_g), ("psi", psi_g), ("gamma", gamma_g)):
        for i, (dw, db) in enumerate(grads):
            analytic[f"{prefix}.{i}.w"] = dw
            analytic[f"{prefix}.{i}.b"] = db
    return finite_difference_check(loss_fn, params, analytic)


def _check_contrastive(seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((12, 4))
    labels = np.repeat(np.arange(3), 4)
    pairs = sample_pairs(labels, budget=40, seed=seed, margin=1.0)

    params = {"e": e}

    def loss_fn():
        loss, _ = contrastive_loss(e, pairs)
        return loss

    _, grads = contrastive_loss(e, pairs)
    return finite_difference_check(loss_fn, params, {"e": grads})


def _check_infonce(seed):
    rng = np.random.default_rng(seed)
    v_x = rng.standard_normal((8, 6))
    v_t = rng.standard_normal((8, 6))
    params = {"v_x": v_x, "v_t": v_t}

    def loss_fn():
        loss, _, _ = infonce_loss(v_x, v_t, tau=0.1)
        return loss

    _, gx, gt = infonce_loss(v_x, v_t, tau=0.1)
    return finite_difference_check(loss_fn, params, {"v_x": gx, "v_t": gt})


def micro_scene(seed, n=12, instances=2):
    """Tiny labeled cloud for end-to-end gradient checks."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.0, 1.0, size=(instances, 3)) * 2.0
    per = n // instances
    pts = np.concatenate(
        [c + 0.3 * rng.standard_normal((per, 3)) for c in centers], axis=0
    )
    labels = np.repeat(np.arange(instances), per)
    return PointCloud(positions=pts, instance_labels=labels)


def _check_end_to_end(seed):
    cloud = micro_scene(seed)
    cfg = SegNetConfig(
        k=3, num_layers=2, width=6, attn_dim=4, fused_dim=8, global_dim=6, embed_dim=4
    )
    rng = np.random.default_rng(seed)
    params = SegNetParams.init(cfg, rng)
    pairs = sample_pairs(cloud.instance_labels, budget=30, seed=seed, margin=1.0)
    pdict = params.named_params()

    def loss_fn():
        _, emb, _ = forward_full(cloud, params)
        loss, _ = contrastive_loss(emb, pairs)
        return loss

    _, emb, cache = forward_full(cloud, params)
    _, dembed = contrastive_loss(emb, pairs)
    grads = backward_full(params, cache, dembed)
    return finite_difference_check(loss_fn, pdict, grads)


def gradient_check_suite(seed=0, tolerance=1e-4):
    """Run every finite-difference check; returns [(name, max_rel_err, ok)]."""
    checks = [
        ("mlp", _check_mlp),
        ("attention_layer", _check_attention_layer),
        ("contrastive_loss", _check_contrastive),
        ("infonce_loss", _check_infonce),
        ("end_to_end", _check_end_to_end),
    ]
    results = []
    for name, fn in checks:
        err = fn(seed)
        results.append((name, err, err < tolerance))
    return results
