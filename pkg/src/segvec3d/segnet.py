"""Stacked neighborhood-attention network producing per-point embeddings.

Pipeline: raw per-point input features (relative neighborhood offsets,
height, optional color) are lifted to the shared layer width, run through L
attention layers with residual connections, fused across scales, enriched
with a max-pooled global context vector, and projected to the instance
embedding space.

Every forward function returns a cache consumed by the matching backward;
gradients flow to all trainable parameters but not through neighbor
selection (graph construction is treated as non-differentiable).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError
from .geometry import build_feature_knn, build_knn_graph
from .nnkit import MlpParams, init_mlp, mlp_backward, mlp_forward, softmax

__all__ = [
    "SegNetConfig",
    "AttentionLayerParams",
    "SegNetParams",
    "PointFeatureField",
    "attention_weights",
    "attention_layer",
    "attention_layer_backward",
    "residual_combine",
    "multiscale_fuse",
    "global_context",
    "global_fuse",
    "embed_points",
    "input_features",
    "forward_full",
    "backward_full",
]


@dataclass
class SegNetConfig:
    """Architecture hyperparameters.

    All attention layers share one width so the residual additions are
    well-typed. attn_dim stays small because similarity logits are raw
    (unscaled) dot products.
    """

    k: int = 16
    num_layers: int = 3
    width: int = 32
    attn_dim: int = 16
    fused_dim: int = 64
    global_dim: int = 32
    embed_dim: int = 16
    recompute_neighbors: bool = False
    use_colors: bool = False

    @property
    def raw_dim(self):
        # centroid offset (3) + height above min z (1) + optional rgb (3)
        return 7 if self.use_colors else 4


@dataclass
class AttentionLayerParams:
    """phi/psi map features to the similarity space; gamma transforms the
    aggregated neighbor values."""

    phi: MlpParams
    psi: MlpParams
    gamma: MlpParams

    def __post_init__(self):
        if self.phi.out_dim != self.psi.out_dim:
            raise InvalidArgumentError("phi and psi must share their output dim")
        if self.gamma.in_dim != self.phi.in_dim:
            raise InvalidArgumentError("gamma input dim must match phi/psi input dim")
        if self.gamma.out_dim != self.gamma.in_dim:
            raise InvalidArgumentError(
                "attention layer must preserve width (residual compatibility)"
            )


@dataclass
class SegNetParams:
    """All trainable parameters plus the architecture config."""

    config: SegNetConfig
    input_mlp: MlpParams
    layers: list[AttentionLayerParams]
    fusion_mlp: MlpParams
    global_mlp: MlpParams
    fuse_mlp: MlpParams
    embed_mlp: MlpParams

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.num_layers or cfg.num_layers < 1:
            raise InvalidArgumentError("layer list must match config.num_layers >= 1")
        if self.input_mlp.in_dim != cfg.raw_dim or self.input_mlp.out_dim != cfg.width:
            raise InvalidArgumentError("input lift dims inconsistent with config")
        for layer in self.layers:
            if layer.phi.in_dim != cfg.width:
                raise InvalidArgumentError("attention layer width inconsistent")
        if self.fusion_mlp.in_dim != cfg.num_layers * cfg.width:
            raise InvalidArgumentError("fusion input dim must be L * width")
        if self.fusion_mlp.out_dim != cfg.fused_dim:
            raise InvalidArgumentError("fusion output dim must be fused_dim")
        if self.global_mlp.in_dim != cfg.fused_dim or self.global_mlp.out_dim != cfg.global_dim:
            raise InvalidArgumentError("global MLP dims inconsistent")
        if self.fuse_mlp.in_dim != cfg.fused_dim + cfg.global_dim:
            raise InvalidArgumentError("fuse MLP input dim must be fused_dim + global_dim")
        if self.fuse_mlp.out_dim != cfg.fused_dim:
            raise InvalidArgumentError("fuse MLP output dim must be fused_dim")
        if self.embed_mlp.in_dim != cfg.fused_dim or self.embed_mlp.out_dim != cfg.embed_dim:
            raise InvalidArgumentError("embedding head dims inconsistent")

    @classmethod
    def init(cls, config, rng):
        """Seeded fan-based initialization of the full parameter set."""
        d, a = config.width, config.attn_dim
        layers = [
            AttentionLayerParams(
                phi=init_mlp(rng, [d, a]),
                psi=init_mlp(rng, [d, a]),
                gamma=init_mlp(rng, [d, d]),
            )
            for _ in range(config.num_layers)
        ]
        return cls(
            config=config,
            input_mlp=init_mlp(rng, [config.raw_dim, d]),
            layers=layers,
            fusion_mlp=init_mlp(rng, [config.num_layers * d, config.fused_dim, config.fused_dim]),
            global_mlp=init_mlp(rng, [config.fused_dim, config.global_dim, config.global_dim]),
            fuse_mlp=init_mlp(
                rng, [config.fused_dim + config.global_dim, config.fused_dim, config.fused_dim]
            ),
            embed_mlp=init_mlp(rng, [config.fused_dim, config.fused_dim, config.embed_dim]),
        )

    def named_params(self):
        """Flat name -> array view of every trainable parameter."""
        out = {}
        out.update(self.input_mlp.named_arrays("input"))
        for i, layer in enumerate(self.layers):
            out.update(layer.phi.named_arrays(f"attn{i}.phi"))
            out.update(layer.psi.named_arrays(f"attn{i}.psi"))
            out.update(layer.gamma.named_arrays(f"attn{i}.gamma"))
        out.update(self.fusion_mlp.named_arrays("fusion"))
        out.update(self.global_mlp.named_arrays("global"))
        out.update(self.fuse_mlp.named_arrays("fuse"))
        out.update(self.embed_mlp.named_arrays("embed"))
        return out


@dataclass
class PointFeatureField:
    """Per-point features at each pipeline stage for one cloud."""

    layer_outputs: list[np.ndarray]  # h^(l), one (N, width) matrix per layer
    fused: np.ndarray  # (N, fused_dim)
    global_vec: np.ndarray  # (global_dim,)
    final: np.ndarray  # (N, fused_dim), global-context enhanced


def attention_weights(center_feat, neighbor_feats, params):
    """Softmax attention over one neighborhood: alpha_j from the dot-product
    similarity of the transformed center and neighbor features."""
    center_feat = np.asarray(center_feat, dtype=float)
    neighbor_feats = np.asarray(neighbor_feats, dtype=float)
    if center_feat.ndim != 1 or neighbor_feats.ndim != 2:
        raise InvalidArgumentError("expect a (d,) center and (k, d) neighbors")
    if neighbor_feats.shape[1] != center_feat.shape[0]:
        raise InvalidArgumentError("center and neighbor feature dims differ")
    p, _ = mlp_forward(params.phi, center_feat)
    q, _ = mlp_forward(params.psi, neighbor_feats)
    return softmax(q @ p)


@dataclass
class AttentionCache:
    params: AttentionLayerParams
    neighbors: np.ndarray
    alpha: np.ndarray
    p: np.ndarray
    q_gathered: np.ndarray
    g: np.ndarray
    g_gathered: np.ndarray
    phi_cache: object
    psi_cache: object
    gamma_cache: object


def attention_layer(features, graph, params):
    """One stack step: h_i = sum_j alpha_ij * gamma(f_j) over j in N(i).

    Returns (h, cache). The center feature enters only through alpha.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise InvalidArgumentError("features must be (N, d)")
    if graph.n != features.shape[0]:
        raise InvalidArgumentError("graph and features disagree on N")
    p, phi_cache = mlp_forward(params.phi, features)
    q, psi_cache = mlp_forward(params.psi, features)
    g, gamma_cache = mlp_forward(params.gamma, features)
    nbr = graph.neighbors
    q_gathered = q[nbr]  # (N, k, a)
    logits = np.einsum("na,nka->nk", p, q_gathered)
    alpha = softmax(logits, axis=1)
    g_gathered = g[nbr]  # (N, k, d)
    h = np.einsum("nk,nkd->nd", alpha, g_gathered)
    cache = AttentionCache(
        params=params,
        neighbors=nbr,
        alpha=alpha,
        p=p,
        q_gathered=q_gathered,
        g=g,
        g_gathered=g_gathered,
        phi_cache=phi_cache,
        psi_cache=psi_cache,
        gamma_cache=gamma_cache,
    )
    return h, cache


def _neighbor_scatter(values, neighbors, n):
    """Sum values[i, j] * rows into position neighbors[i, j]: returns the
    transpose-adjacency product used by the backward scatter."""
    n_rows, k = neighbors.shape
    indptr = np.arange(n_rows + 1) * k
    adj = sp.csr_matrix(
        (values.ravel(), neighbors.ravel(), indptr), shape=(n_rows, n)
    )
    return adj


def attention_layer_backward(params, cache, upstream):
    """Gradients of an attention layer w.r.t. its MLPs and input features."""
    upstream = np.asarray(upstream, dtype=float)
    n = cache.p.shape[0]
    nbr = cache.neighbors
    alpha = cache.alpha
    # aggregation: h_i = sum_j alpha_ij g_j
    dalpha = np.einsum("nd,nkd->nk", upstream, cache.g_gathered)
    dg = _neighbor_scatter(alpha, nbr, n).T @ upstream
    # softmax Jacobian per neighborhood row
    dlogits = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dp = np.einsum("nk,nka->na", dlogits, cache.q_gathered)
    dq = _neighbor_scatter(dlogits, nbr, n).T @ cache.p
    phi_grads, df_phi = mlp_backward(params.phi, cache.phi_cache, dp)
    psi_grads, df_psi = mlp_backward(params.psi, cache.psi_cache, dq)
    gamma_grads, df_gamma = mlp_backward(params.gamma, cache.gamma_cache, dg)
    return (phi_grads, psi_grads, gamma_grads), df_phi + df_psi + df_gamma


def residual_combine(layer_out, layer_in):
    """Elementwise residual sum of a layer's output with its input."""
    layer_out = np.asarray(layer_out, dtype=float)
    layer_in = np.asarray(layer_in, dtype=float)
    if layer_out.shape != layer_in.shape:
        raise InvalidArgumentError(
            f"residual shapes differ: {layer_out.shape} vs {layer_in.shape}"
        )
    return layer_out + layer_in


def multiscale_fuse(layer_outputs, params):
    """Concatenate all per-layer outputs and mix them with the fusion MLP."""
    if not layer_outputs:
        raise InvalidArgumentError("need at least one layer output")
    n = layer_outputs[0].shape[0]
    if any(h.shape[0] != n for h in layer_outputs):
        raise InvalidArgumentError("layer outputs disagree on N")
    concat = np.concatenate(layer_outputs, axis=1)
    fused, cache = mlp_forward(params, concat)
    return fused, (cache, [h.shape[1] for h in layer_outputs])


def multiscale_fuse_backward(params, cache, upstream):
    mlp_cache, widths = cache
    grads, dconcat = mlp_backward(params, mlp_cache, upstream)
    splits = np.cumsum(widths)[:-1]
    return grads, np.split(dconcat, splits, axis=1)


def global_context(fused, params):
    """Column-wise max pool over points followed by the global MLP."""
    fused = np.asarray(fused, dtype=float)
    if fused.ndim != 2 or fused.shape[0] < 1:
        raise InvalidArgumentError("fused features must be a non-empty (N, d) matrix")
    pooled = fused.max(axis=0)
    arg = fused.argmax(axis=0)  # first maximizer per column: deterministic
    z, cache = mlp_forward(params, pooled)
    return z, (cache, arg, fused.shape)


def global_context_backward(params, cache, upstream):
    mlp_cache, arg, shape = cache
    grads, dpooled = mlp_backward(params, mlp_cache, upstream)
    dfused = np.zeros(shape)
    dfused[arg, np.arange(shape[1])] = dpooled
    return grads, dfused


def global_fuse(fused, z, params):
    """F_i = H_i + MLP([H_i; z]): inject the scene vector into each point."""
    fused = np.asarray(fused, dtype=float)
    z = np.asarray(z, dtype=float)
    if fused.ndim != 2 or z.ndim != 1:
        raise InvalidArgumentError("expect (N, d_f) features and a (d_z,) vector")
    if params.in_dim != fused.shape[1] + z.shape[0]:
        raise InvalidArgumentError("fuse MLP input dim mismatch")
    concat = np.concatenate([fused, np.broadcast_to(z, (fused.shape[0], z.shape[0]))], axis=1)
    delta, cache = mlp_forward(params, concat)
    return fused + delta, (cache, fused.shape[1])


def global_fuse_backward(params, cache, upstream):
    mlp_cache, d_f = cache
    grads, dconcat = mlp_backward(params, mlp_cache, upstream)
    dfused = upstream + dconcat[:, :d_f]
    dz = dconcat[:, d_f:].sum(axis=0)
    return grads, dfused, dz


def embed_points(final, params):
    """Pointwise projection of fused features into the embedding space."""
    final = np.asarray(final, dtype=float)
    if final.ndim != 2 or final.shape[1] != params.in_dim:
        raise InvalidArgumentError("final features do not match embedding head input")
    return mlp_forward(params, final)


def input_features(cloud, graph, config):
    """First-layer per-point features: offset from the local neighborhood
    centroid, height above the cloud's minimum z, and optional color.

    Relative quantities only, so the network is translation invariant."""
    pos = cloud.positions
    centroid = pos[graph.neighbors].mean(axis=1)
    offset = pos - centroid
    height = pos[:, 2] - pos[:, 2].min()
    parts = [offset, height[:, None]]
    if config.use_colors:
        if cloud.colors is None:
            raise InvalidArgumentError("config.use_colors=True but cloud has no colors")
        parts.append(cloud.colors)
    return np.concatenate(parts, axis=1)


@dataclass
class SegNetCache:
    """Everything backward_full needs from one forward_full run."""

    params: SegNetParams
    graphs: list
    raw: np.ndarray
    input_cache: object
    layer_caches: list = field(default_factory=list)
    fusion_cache: object = None
    global_cache: object = None
    fuse_cache: object = None
    embed_cache: object = None


def forward_full(cloud, params, graph=None):
    """Run the complete network on a cloud.

    Returns (PointFeatureField, embeddings, cache) where embeddings is the
    (N, embed_dim) matrix. With recompute_neighbors, layers beyond the
    first rebuild their kNN graph from the previous layer's features.
    A position-space graph already built with the config's k may be passed
    in to skip rebuilding it (training caches these per scene).
    """
    cfg = params.config
    if cloud.n <= cfg.k:
        raise InvalidArgumentError(f"need more than k={cfg.k} points, got {cloud.n}")
    if graph is None:
        graph = build_knn_graph(cloud, cfg.k)
    elif graph.k != cfg.k or graph.n != cloud.n:
        raise InvalidArgumentError("prebuilt graph does not match cloud and config")
    raw = input_features(cloud, graph, cfg)
    f, input_cache = mlp_forward(params.input_mlp, raw)
    cache = SegNetCache(params=params, graphs=[graph], raw=raw, input_cache=input_cache)
    layer_outputs = []
    for li, layer in enumerate(params.layers):
        if li > 0 and cfg.recompute_neighbors:
            layer_graph = build_feature_knn(f, cfg.k)
        else:
            layer_graph = graph
        if li > 0:
            cache.graphs.append(layer_graph)
        h, layer_cache = attention_layer(f, layer_graph, layer)
        cache.layer_caches.append(layer_cache)
        layer_outputs.append(h)
        f = residual_combine(h, f)
    fused, cache.fusion_cache = multiscale_fuse(layer_outputs, params.fusion_mlp)
    z, cache.global_cache = global_context(fused, params.global_mlp)
    final, cache.fuse_cache = global_fuse(fused, z, params.fuse_mlp)
    embeddings, cache.embed_cache = embed_points(final, params.embed_mlp)
    field_out = PointFeatureField(
        layer_outputs=layer_outputs, fused=fused, global_vec=z, final=final
    )
    return field_out, embeddings, cache


def _store_mlp_grads(out, prefix, layer_grads):
    for i, (dw, db) in enumerate(layer_grads):
        out[f"{prefix}.{i}.w"] = dw
        out[f"{prefix}.{i}.b"] = db


def backward_full(params, cache, grad_embeddings, grad_final=None):
    """Backpropagate from embedding (and optionally final-feature) space to
    every trainable parameter. Returns a name -> gradient dict matching
    params.named_params()."""
    if cache.params is not params:
        raise InvalidArgumentError("cache does not belong to these parameters")
    grads = {}
    embed_grads, dfinal = mlp_backward(
        params.embed_mlp, cache.embed_cache, grad_embeddings
    )
    _store_mlp_grads(grads, "embed", embed_grads)
    if grad_final is not None:
        dfinal = dfinal + grad_final
    fuse_grads, dfused, dz = global_fuse_backward(params.fuse_mlp, cache.fuse_cache, dfinal)
    _store_mlp_grads(grads, "fuse", fuse_grads)
    global_grads, dfused_pool = global_context_backward(
        params.global_mlp, cache.global_cache, dz
    )
    _store_mlp_grads(grads, "global", global_grads)
    dfused = dfused + dfused_pool
    fusion_grads, dh_list = multiscale_fuse_backward(
        params.fusion_mlp, cache.fusion_cache, dfused
    )
    _store_mlp_grads(grads, "fusion", fusion_grads)
    df = np.zeros_like(dh_list[-1])
    for li in range(len(params.layers) - 1, -1, -1):
        dh_total = dh_list[li] + df
        (phi_g, psi_g, gamma_g), dinput = attention_layer_backward(
            params.layers[li], cache.layer_caches[li], dh_total
        )
        _store_mlp_grads(grads, f"attn{li}.phi", phi_g)
        _store_mlp_grads(grads, f"attn{li}.psi", psi_g)
        _store_mlp_grads(grads, f"attn{li}.gamma", gamma_g)
        df = df + dinput
    input_grads, _ = mlp_backward(params.input_mlp, cache.input_cache, df)
    _store_mlp_grads(grads, "input", input_grads)
    return grads
