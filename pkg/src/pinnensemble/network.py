"""Fully connected tanh surrogates."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from .autodiff import fast_tanh, taylor_forward
from .errors import ContractViolation


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer sizes plus the fixed input scaling and output transform.

    ``input_bounds`` maps each coordinate affinely onto [-1, 1] before the
    first layer; it is part of the network, so derivatives with respect to
    the raw coordinates include the scaling.  ``output_transform`` is either
    ``"identity"`` or ``"softplus_floor"`` (``floor + softplus(raw)``).
    """

    input_dim: int
    hidden_layers: int = 4
    hidden_width: int = 20
    output_dim: int = 1
    input_bounds: tuple[tuple[float, float], ...] | None = None
    output_transform: str = "identity"
    output_floor: float = 0.0

    def __post_init__(self):
        if min(self.input_dim, self.hidden_layers, self.hidden_width, self.output_dim) < 1:
            raise ContractViolation(f"all layer dimensions must be >= 1: {self}")
        if self.output_transform not in ("identity", "softplus_floor"):
            raise ContractViolation(f"unknown output transform {self.output_transform!r}")
        if self.input_bounds is not None:
            if len(self.input_bounds) != self.input_dim:
                raise ContractViolation("input_bounds must give one (lo, hi) per input")
            if any(hi <= lo for lo, hi in self.input_bounds):
                raise ContractViolation("input_bounds must have hi > lo")

    @property
    def sizes(self):
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def n_params(self):
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def input_shift_scale(self):
        if self.input_bounds is None:
            return None, None
        lo = jnp.array([b[0] for b in self.input_bounds])
        hi = jnp.array([b[1] for b in self.input_bounds])
        return lo, 2.0 / (hi - lo)

    def apply_output_transform(self, ch, first=(), second=()):
        """Push value/derivative channels through the output transform."""
        if self.output_transform == "identity":
            return ch
        r = ch[()]
        sig = jax.nn.sigmoid(r)
        out = {(): self.output_floor + jax.nn.softplus(r)}
        for f in first:
            out[f] = sig * ch[f]
        for p in second:
            out[p] = sig * (1.0 - sig) * ch[(p[0],)] * ch[(p[1],)] + sig * ch[p]
        return out

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "output_dim": self.output_dim,
            "input_bounds": None if self.input_bounds is None else [list(b) for b in self.input_bounds],
            "output_transform": self.output_transform,
            "output_floor": self.output_floor,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("input_bounds") is not None:
            d["input_bounds"] = tuple(tuple(float(v) for v in b) for b in d["input_bounds"])
        return cls(**d)


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class NetworkParams:
    """Weights ``W[l]`` of shape (out, in) and biases ``b[l]`` for each layer."""

    arch: MlpArchitecture
    weights: tuple
    biases: tuple
    seed: int | None = field(default=None)

    def tree_flatten(self):
        return (self.weights, self.biases), (self.arch, self.seed)

    @classmethod
    def tree_unflatten(cls, aux, children):
        arch, seed = aux
        weights, biases = children
        return cls(arch, tuple(weights), tuple(biases), seed)

    def check_shapes(self):
        s = self.arch.sizes
        if len(self.weights) != len(s) - 1 or len(self.biases) != len(s) - 1:
            raise ContractViolation("layer count does not match architecture")
        for l, (a, b) in enumerate(zip(s[:-1], s[1:])):
            if tuple(np.shape(self.weights[l])) != (b, a) or tuple(np.shape(self.biases[l])) != (b,):
                raise ContractViolation(f"layer {l} has shape {np.shape(self.weights[l])}, expected {(b, a)}")
        return self

    def flat(self):
        return np.concatenate([np.ravel(np.asarray(a)) for pair in zip(self.weights, self.biases) for a in pair])

    def as_numpy(self):
        return replace(self, weights=tuple(np.asarray(w) for w in self.weights),
                       biases=tuple(np.asarray(b) for b in self.biases))


def init_params(arch: MlpArchitecture, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    s = arch.sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(s[:-1], s[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(arch, tuple(weights), tuple(biases), int(seed))


def dropout_masks(key, n_points, arch: MlpArchitecture, rate: float):
    """Inverted-dropout multipliers for every hidden layer."""
    keys = jax.random.split(key, arch.hidden_layers)
    keep = 1.0 - rate
    return [jax.random.bernoulli(k, keep, (n_points, arch.hidden_width)) / keep for k in keys]


def forward(params: NetworkParams, x, masks=None):
    """Network output for one point ``(d,)`` or a batch ``(N, d)``."""
    x = jnp.asarray(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[-1] != params.arch.input_dim:
        raise ContractViolation(f"input dimension {X.shape[-1]} != {params.arch.input_dim}")
    lo, scale = params.arch.input_shift_scale()
    h = (X - lo) * scale - 1.0 if scale is not None else X
    n = len(params.weights)
    for l in range(n - 1):
        h = fast_tanh(h @ params.weights[l].T + params.biases[l])
        if masks is not None:
            h = h * masks[l]
    out = params.arch.apply_output_transform({(): h @ params.weights[-1].T + params.biases[-1]})[()]
    return out[0] if single else out


def hidden_activations(params: NetworkParams, X):
    """Post-activation values of every hidden layer (for bound checks)."""
    lo, scale = params.arch.input_shift_scale()
    h = (jnp.asarray(X) - lo) * scale - 1.0 if scale is not None else jnp.asarray(X)
    acts = []
    for l in range(len(params.weights) - 1):
        h = fast_tanh(h @ params.weights[l].T + params.biases[l])
        acts.append(h)
    return acts


def derivatives(params: NetworkParams, X, orders=(), masks=None):
    """Alias of :func:`taylor_forward` returning only the first output column."""
    out = taylor_forward(params, X, orders, masks)
    return {k: v[:, 0] for k, v in out.items()}
