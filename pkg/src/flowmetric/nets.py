"""Small dense MLPs in float64 with hand-written reverse-mode gradients.

The scope is deliberately narrow: affine layers with softplus / elu /
identity activations, batched forward passes, input gradients of
scalar-output nets, and parameter gradients of losses that mix network
values with input gradients (the double-backprop path needed by
Lipschitz-style gradient penalties). No general tape, no GPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Shapes of inputs or layers do not line up."""


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_d1(x):
    return expit(x)


def _softplus_d2(x):
    s = expit(x)
    return s * (1.0 - s)


def _elu(x):
    out = np.array(x, dtype=float, copy=True)
    neg = out < 0
    out[neg] = np.expm1(out[neg])
    return out


def _elu_d1(x):
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    neg = x < 0
    out[neg] = np.exp(x[neg])
    return out


def _elu_d2(x):
    # Second derivative at the kink is taken as the left limit (1).
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    neg = x < 0
    out[neg] = np.exp(x[neg])
    out[x == 0] = 1.0
    return out


def _identity(x):
    return np.asarray(x, dtype=float)


def _identity_d1(x):
    return np.ones_like(np.asarray(x, dtype=float))


def _identity_d2(x):
    return np.zeros_like(np.asarray(x, dtype=float))


ACTIVATIONS = {
    "softplus": (_softplus, _softplus_d1, _softplus_d2),
    "elu": (_elu, _elu_d1, _elu_d2),
    "identity": (_identity, _identity_d1, _identity_d2),
}


def activation_eval(tag: str, x):
    """Evaluate the named activation elementwise. Total on all finite inputs."""
    if tag not in ACTIVATIONS:
        raise ValueError(f"unknown activation tag {tag!r}")
    return ACTIVATIONS[tag][0](np.asarray(x, dtype=float))


@dataclass
class Mlp:
    """Fully connected net: weights[l] is (out_l, in_l), biases[l] is (out_l,).

    With ``time_concat`` set, a scalar time is appended to the input of every
    layer, so each layer's input width is its data width plus one.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    in_dim: int = 0
    time_concat: bool = False

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        extra = 1 if self.time_concat else 0
        width = self.in_dim
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation tag {act!r}")
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
                raise DimensionError(f"layer {i}: weight/bias shapes {W.shape}/{b.shape}")
            if W.shape[1] != width + extra:
                raise DimensionError(
                    f"layer {i}: expected input width {width + extra}, got {W.shape[1]}"
                )
            width = W.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]


def init_mlp(
    in_dim: int,
    hidden: list,
    out_dim: int,
    rng: np.random.Generator,
    activation: str = "softplus",
    time_concat: bool = False,
    out_scale: float = 1.0,
) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``out_scale`` rescales the last layer's weights; used to start
    matrix-field nets near zero output.
    """
    sizes = [in_dim] + list(hidden) + [out_dim]
    extra = 1 if time_concat else 0
    weights, biases, acts = [], [], []
    for l in range(len(sizes) - 1):
        fan_in = sizes[l] + extra
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(sizes[l + 1], fan_in))
        if l == len(sizes) - 2:
            W = W * out_scale
        weights.append(W)
        biases.append(np.zeros(sizes[l + 1]))
        acts.append(activation if l < len(sizes) - 2 else "identity")
    return Mlp(weights, biases, acts, in_dim=in_dim, time_concat=time_concat)


@dataclass
class ForwardCache:
    """Per-layer augmented inputs and pre-activations from one forward pass."""

    inputs: list   # (N, in_l [+1]) per layer
    pre: list      # (N, out_l) per layer
    out: np.ndarray


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    if t.shape != (n,):
        raise DimensionError(f"time must be scalar or shape ({n},), got {t.shape}")
    return t[:, None]


def forward_cached(net: Mlp, x: np.ndarray, t=None) -> ForwardCache:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionError(f"expected (N, {net.in_dim}) input, got {x.shape}")
    if net.time_concat == (t is None):
        raise DimensionError("time must be supplied iff the net concatenates time")
    tcol = _time_column(t, x.shape[0]) if net.time_concat else None
    inputs, pre = [], []
    z = x
    for W, b, act in zip(net.weights, net.biases, net.activations):
        z_in = np.concatenate([z, tcol], axis=1) if net.time_concat else z
        a = z_in @ W.T + b
        inputs.append(z_in)
        pre.append(a)
        z = ACTIVATIONS[act][0](a)
    return ForwardCache(inputs=inputs, pre=pre, out=z)


def mlp_forward(net: Mlp, x: np.ndarray, t=None) -> np.ndarray:
    """Batched forward pass; a 1-D input returns a 1-D output."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    out = forward_cached(net, x, t).out
    return out[0] if single else out


def input_gradient_cached(net: Mlp, cache: ForwardCache) -> np.ndarray:
    """Gradient of the scalar output w.r.t. the data input (not time)."""
    if net.out_dim != 1:
        raise DimensionError("input gradients are defined for scalar-output nets only")
    p = np.ones((cache.out.shape[0], 1))
    for l in range(net.n_layers - 1, -1, -1):
        d1 = ACTIVATIONS[net.activations[l]][1](cache.pre[l])
        p = (d1 * p) @ net.weights[l]
        if net.time_concat:
            p = p[:, :-1]
    return p


def input_gradient(net: Mlp, x: np.ndarray, t=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    g = input_gradient_cached(net, forward_cached(net, x, t))
    return g[0] if single else g


def vjp_cached(net: Mlp, cache: ForwardCache, cotangent: np.ndarray):
    """Backprop a (N, out) cotangent; returns (input cotangent, param grads).

    Param grads come back as a list of (W_bar, b_bar) in layer order. First
    order only; works for vector-output nets.
    """
    zbar = np.asarray(cotangent, dtype=float)
    if zbar.shape != cache.out.shape:
        raise DimensionError(f"cotangent shape {zbar.shape} != output {cache.out.shape}")
    grads = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        abar = ACTIVATIONS[net.activations[l]][1](cache.pre[l]) * zbar
        grads[l] = (abar.T @ cache.inputs[l], abar.sum(axis=0))
        zbar = abar @ net.weights[l]
        if net.time_concat:
            zbar = zbar[:, :-1]
    return zbar, grads


def grads_of_value_and_input_gradient(net: Mlp, cache: ForwardCache, ybar, gbar):
    """Parameter gradients of  sum_n ybar_n * y_n + sum_n <gbar_n, grad_x y_n>.

    This is the double-backprop primitive: the second term differentiates a
    function of the input gradient w.r.t. the parameters. Implemented as a
    forward tangent sweep in direction ``gbar`` (so the tangent output equals
    <gbar, grad_x y>) followed by one reverse sweep over the augmented
    program. Exact for any depth; needs activations twice differentiable,
    which softplus and elu (one-sided at 0) are.
    """
    if net.out_dim != 1:
        raise DimensionError("double backprop is defined for scalar-output nets only")
    n = cache.out.shape[0]
    if gbar is None:
        yb = np.zeros(n) if ybar is None else np.asarray(ybar, dtype=float)
        _, grads = vjp_cached(net, cache, yb[:, None])
        return grads

    gbar = np.asarray(gbar, dtype=float)
    # Tangent forward: tz carries d/d(eps) of each layer output for inputs
    # perturbed as x + eps*gbar. The time column has zero tangent.
    tins, tpre = [], []
    tz = gbar
    for l in range(net.n_layers):
        if net.time_concat:
            tz = np.concatenate([tz, np.zeros((n, 1))], axis=1)
        ta = tz @ net.weights[l].T
        tins.append(tz)
        tpre.append(ta)
        tz = ACTIVATIONS[net.activations[l]][1](cache.pre[l]) * ta

    # Joint reverse sweep over (value, tangent).
    zbar = (np.zeros(n) if ybar is None else np.asarray(ybar, dtype=float))[:, None]
    tzbar = np.ones((n, 1))
    grads = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        _, d1f, d2f = ACTIVATIONS[net.activations[l]]
        d1 = d1f(cache.pre[l])
        abar = d1 * zbar + d2f(cache.pre[l]) * tpre[l] * tzbar
        tabar = d1 * tzbar
        grads[l] = (
            abar.T @ cache.inputs[l] + tabar.T @ tins[l],
            abar.sum(axis=0),
        )
        zbar = abar @ net.weights[l]
        tzbar = tabar @ net.weights[l]
        if net.time_concat:
            zbar = zbar[:, :-1]
            tzbar = tzbar[:, :-1]
    return grads


# -- flat parameter vectors ---------------------------------------------------

def param_shapes(net: Mlp) -> list:
    shapes = []
    for W, b in zip(net.weights, net.biases):
        shapes.append(W.shape)
        shapes.append(b.shape)
    return shapes


def n_params(net: Mlp) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(net))


def flatten_params(net: Mlp) -> np.ndarray:
    """All parameters as one flat vector (row-major weights, then bias, per layer)."""
    parts = []
    for W, b in zip(net.weights, net.biases):
        parts.append(W.ravel())
        parts.append(b)
    return np.concatenate(parts)


def set_params(net: Mlp, vec: np.ndarray) -> None:
    """Write a flat vector back into the net. Exact inverse of flatten_params."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (n_params(net),):
        raise DimensionError(f"expected {n_params(net)} parameters, got {vec.shape}")
    offset = 0
    for l in range(net.n_layers):
        w_size = net.weights[l].size
        net.weights[l] = vec[offset:offset + w_size].reshape(net.weights[l].shape).copy()
        offset += w_size
        b_size = net.biases[l].size
        net.biases[l] = vec[offset:offset + b_size].copy()
        offset += b_size


def flatten_grads(grads: list) -> np.ndarray:
    """Flatten a per-layer (W_bar, b_bar) list in the flatten_params layout."""
    parts = []
    for Wb, bb in grads:
        parts.append(np.asarray(Wb).ravel())
        parts.append(np.asarray(bb))
    return np.concatenate(parts)


def accumulate_grads(total: list, grads: list, scale: float = 1.0) -> list:
    if total is None:
        return [(scale * Wb, scale * bb) for Wb, bb in grads]
    return [
        (tw + scale * Wb, tb + scale * bb)
        for (tw, tb), (Wb, bb) in zip(total, grads)
    ]


# -- JSON-friendly serialization ----------------------------------------------

def mlp_to_dict(net: Mlp) -> dict:
    return {
        "in_dim": net.in_dim,
        "time_concat": net.time_concat,
        "layers": [
            {
                "shape": list(W.shape),
                "activation": act,
                "weights": W.ravel().tolist(),
                "bias": b.tolist(),
            }
            for W, b, act in zip(net.weights, net.biases, net.activations)
        ],
    }


def mlp_from_dict(d: dict) -> Mlp:
    weights, biases, acts = [], [], []
    for layer in d["layers"]:
        shape = tuple(layer["shape"])
        weights.append(np.asarray(layer["weights"], dtype=float).reshape(shape))
        biases.append(np.asarray(layer["bias"], dtype=float))
        acts.append(layer["activation"])
    return Mlp(weights, biases, acts, in_dim=int(d["in_dim"]),
               time_concat=bool(d["time_concat"]))
