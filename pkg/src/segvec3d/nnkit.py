"""Dense MLP math: forward/backward passes, softmax, Adam, gradient checking.

Everything runs in float64. Backward passes are explicit (no tape): each
forward returns a cache that its backward consumes, and every gradient in
the package is validated against central finite differences through
:func:`finite_difference_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError

__all__ = [
    "DenseLayer",
    "MlpParams",
    "MlpCache",
    "OptimizerState",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "softmax",
    "adam_step",
    "finite_difference_check",
    "global_norm_clip",
]


def assert_finite(name, arr):
    """Raise if an array holds NaN or Inf (validation pass for op outputs)."""
    if not np.isfinite(arr).all():
        raise InvalidArgumentError(f"{name} contains non-finite values")


@dataclass
class DenseLayer:
    """One affine layer: weight is (d_out, d_in), bias is (d_out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise InvalidArgumentError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise InvalidArgumentError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )


@dataclass
class MlpParams:
    """A stack of dense layers with ReLU between them and a linear final layer.

    A single layer is therefore purely linear. Adjacent layer dimensions
    must chain: layer i+1 input dim == layer i output dim.
    """

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise InvalidArgumentError(
                    f"layer dims do not chain: {a.weight.shape} -> {b.weight.shape}"
                )

    @property
    def in_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[0]

    def named_arrays(self, prefix):
        """Yield (name, array) pairs, e.g. ``embed.0.w`` — stable order."""
        for i, layer in enumerate(self.layers):
            yield f"{prefix}.{i}.w", layer.weight
            yield f"{prefix}.{i}.b", layer.bias


@dataclass
class MlpCache:
    """Intermediates from one mlp_forward call, consumed by mlp_backward."""

    params: MlpParams
    inputs: list[np.ndarray]  # input to each layer (post-activation)
    preacts: list[np.ndarray]  # pre-activation output of each layer


def init_mlp(rng, dims):
    """Build an MLP with the given layer widths, e.g. dims=[8, 16, 4].

    Weights are uniform in +-sqrt(6 / (d_in + d_out)); biases start at zero.
    """
    if len(dims) < 2:
        raise InvalidArgumentError("dims must list at least input and output width")
    layers = []
    for d_in, d_out in zip(dims, dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        layers.append(DenseLayer(weight=w, bias=np.zeros(d_out)))
    return MlpParams(layers=layers)


def mlp_forward(params, x):
    """Run the MLP on a (batch, d_in) matrix.

    Returns (output, cache). Hidden activations are ReLU; the final layer
    is linear.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2:
        raise InvalidArgumentError(f"input must be 1-D or 2-D, got ndim={x.ndim}")
    if x.shape[1] != params.in_dim:
        raise InvalidArgumentError(
            f"input has {x.shape[1]} columns, MLP expects {params.in_dim}"
        )
    inputs, preacts = [], []
    h = x
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    if squeeze:
        return h[0], MlpCache(params=params, inputs=inputs, preacts=preacts)
    return h, MlpCache(params=params, inputs=inputs, preacts=preacts)


def mlp_backward(params, cache, upstream):
    """Backpropagate an upstream gradient through a cached forward pass.

    Returns (layer_grads, input_grad) where layer_grads is a list of
    (dW, db) matching params.layers.
    """
    if cache.params is not params:
        raise InvalidStateError("cache does not belong to these parameters")
    upstream = np.asarray(upstream, dtype=float)
    squeeze = upstream.ndim == 1
    if squeeze:
        upstream = upstream[None, :]
    if upstream.shape != (cache.inputs[0].shape[0], params.out_dim):
        raise InvalidArgumentError(
            f"upstream shape {upstream.shape} does not match forward output"
        )
    layer_grads = [None] * len(params.layers)
    last = len(params.layers) - 1
    delta = upstream
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * (cache.preacts[i] > 0.0)
        dw = delta.T @ cache.inputs[i]
        db = delta.sum(axis=0)
        layer_grads[i] = (dw, db)
        delta = delta @ params.layers[i].weight
    if squeeze:
        delta = delta[0]
    return layer_grads, delta


def softmax(logits, axis=-1):
    """Numerically stable softmax (max-subtracted) along an axis."""
    a = np.asarray(logits, dtype=float)
    if a.size == 0:
        raise InvalidArgumentError("softmax input is empty")
    if not np.isfinite(a).all():
        raise InvalidArgumentError("softmax input contains non-finite values")
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class OptimizerState:
    """Adam moment accumulators keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place; increments state.step.

    params and grads are name -> array dicts with matching shapes.
    """
    if set(params) != set(state.m):
        raise InvalidArgumentError("parameter names do not match optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidArgumentError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def global_norm_clip(grads, max_norm):
    """Scale a gradient dict in place so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def finite_difference_check(loss_fn, params, analytic, h=1e-5, denom_floor=1e-4):
    """Max guarded relative error between analytic and central-difference grads.

    loss_fn() must re-evaluate the scalar loss from the current contents of
    the arrays in params; entries are perturbed in place and restored.
    The error for one entry is |num - ana| / max(|num|, |ana|, denom_floor),
    so near-zero gradients are compared absolutely at the floor scale.
    """
    worst = 0.0
    for name, arr in params.items():
        g = np.asarray(analytic[name])
        if g.shape != arr.shape:
            raise InvalidArgumentError(f"analytic grad shape mismatch for {name}")
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), denom_floor)
            worst = max(worst, err)
    return worst
