"""Benchmark inverse problems: residuals, boundary operators and true fields.

Each problem exposes the same surface to the trainer:

* ``input_dim`` / ``input_bounds`` of the observed field,
* ``qoi_dims``: which input coordinates the unknown field depends on,
* ``u_orders`` / ``q_orders``: derivative channels the residual needs,
* ``residual(u, q, X)`` over channel dicts returned by ``taylor_forward``,
* ``boundary_operators()`` and ``collocation_points(shape)``,
* ``true_qoi(X)`` plus ``qoi_metric_transform`` (the space metrics use).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .errors import ContractViolation


def _need(derivs, key, what):
    try:
        return derivs[key]
    except KeyError:
        raise ContractViolation(f"{what} requires derivative {key}") from None


def source_residual(u_derivs, s_value, lam=0.02):
    """``lam * (u_xx + u_yy) + s``."""
    return lam * (_need(u_derivs, (0, 0), "source residual") + _need(u_derivs, (1, 1), "source residual")) + s_value


def gaussian_source_1d(x, t, centers=(0.25, 0.5, 0.75), strength=100.0, variance=1e-3, cutoff=0.01):
    """Triple Gaussian pulse switched off at ``t >= cutoff`` (H(0) = 1)."""
    xp = jnp if isinstance(x, jnp.ndarray) or isinstance(t, jnp.ndarray) else np
    sig = math.sqrt(variance)
    amp = strength / (math.sqrt(2.0 * math.pi) * sig)
    total = sum(amp * xp.exp(-((c - x) ** 2) / (2.0 * variance)) for c in centers)
    return total * xp.where(t < cutoff, 1.0, 0.0)


def diffusion_residual(u_derivs, v_value, v_derivs, point, source=gaussian_source_1d):
    """``u_t - (v' u_x + v u_xx) - S(x, t)`` with ``point = (x, t)`` columns."""
    u_t = _need(u_derivs, (1,), "diffusion residual")
    u_x = _need(u_derivs, (0,), "diffusion residual")
    u_xx = _need(u_derivs, (0, 0), "diffusion residual")
    v_x = _need(v_derivs, (0,), "diffusion residual")
    x, t = point[..., 0], point[..., 1]
    return u_t - (v_x * u_x + v_value * u_xx) - source(x, t)


@dataclass(frozen=True)
class BoundaryOperator:
    """Dirichlet (``u - value``) or Neumann (``du/dx_dim - value``) residual on a point set."""

    name: str
    kind: str
    points: np.ndarray = field(repr=False)
    dim: int | None = None
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ContractViolation(f"unknown boundary kind {self.kind!r}")
        if self.kind == "neumann" and self.dim is None:
            raise ContractViolation("neumann operator needs a normal dimension")
        if len(self.points) == 0:
            raise ContractViolation(f"boundary operator {self.name!r} has no points")

    @property
    def orders(self):
        return () if self.kind == "dirichlet" else ((self.dim,),)

    def residual(self, derivs):
        if self.kind == "dirichlet":
            return derivs[()] - self.value
        return _need(derivs, (self.dim,), self.name) - self.value


def _grid(bounds, shape):
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class SourceProblem:
    """Steady diffusion with two Gaussian sources on the unit square."""

    lam: float = 0.02
    strengths: tuple[float, ...] = (1.0, 2.0)
    scales: tuple[float, ...] = (0.15, 0.05)
    centers: tuple[tuple[float, float], ...] = ((0.3, 0.4), (0.8, 0.8))
    boundary_points_per_side: int = 100

    name = "source2d"
    input_dim = 2
    qoi_dims = (0, 1)
    input_bounds = ((0.0, 1.0), (0.0, 1.0))
    u_orders = ((0, 0), (1, 1))
    q_orders = ()
    qoi_transform = "identity"
    qoi_floor = 0.0

    def __post_init__(self):
        if self.lam <= 0 or min(self.scales) <= 0:
            raise ContractViolation("lambda and source scales must be positive")
        for c in self.centers:
            if not all(0.0 < v < 1.0 for v in c):
                raise ContractViolation(f"source center {c} outside the domain")

    def true_qoi(self, X):
        X = np.asarray(X, dtype=float)
        s = np.zeros(len(X))
        for k, sig, p in zip(self.strengths, self.scales, self.centers):
            s += k * np.exp(-0.5 / sig**2 * np.sum((X - np.asarray(p)) ** 2, axis=1))
        return s

    def qoi_metric_transform(self, q):
        return q

    def residual(self, u, q, X):
        return source_residual(u, q[()], self.lam)

    def collocation_points(self, shape=(48, 50)):
        return _grid(self.input_bounds, shape)

    def boundary_operators(self):
        n = self.boundary_points_per_side
        s = np.linspace(0.0, 1.0, n)
        zero, one = np.zeros(n), np.ones(n)
        edges = [np.c_[s, zero], np.c_[s, one], np.c_[zero, s], np.c_[one, s]]
        pts = np.unique(np.concatenate(edges), axis=0)
        return [BoundaryOperator("dirichlet-outer", "dirichlet", pts)]

    def to_dict(self):
        return {"kind": self.name, "lam": self.lam, "strengths": list(self.strengths),
                "scales": list(self.scales), "centers": [list(c) for c in self.centers]}


def sinusoidal_log_diffusivity(x):
    return np.sin(2.0 * np.pi * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class DiffusionProblem:
    """Transient 1D diffusion with an unknown spatially varying diffusivity.

    ``log_diffusivity`` returns ``m(x)``; the diffusivity is
    ``v = floor + exp(m)``.  ``profile`` is a label for reports.
    """

    profile: str = "sinusoidal"
    log_diffusivity: object = field(default=sinusoidal_log_diffusivity, repr=False, compare=False)
    horizon: float = 0.03
    source_centers: tuple[float, ...] = (0.25, 0.5, 0.75)
    source_strength: float = 100.0
    source_variance: float = 1e-3
    cutoff: float = 0.01
    qoi_floor: float = 0.1
    boundary_points: int = 100
    initial_points: int = 50

    name = "diffusion"
    input_dim = 2
    qoi_dims = (0,)
    u_orders = ((0,), (1,), (0, 0))
    q_orders = ((0,),)
    qoi_transform = "softplus_floor"

    @property
    def input_bounds(self):
        return ((0.0, 1.0), (0.0, self.horizon))

    def source(self, x, t):
        return gaussian_source_1d(x, t, self.source_centers, self.source_strength,
                                  self.source_variance, self.cutoff)

    def true_log_diffusivity(self, x):
        return np.asarray(self.log_diffusivity(np.asarray(x, dtype=float)), dtype=float)

    def true_diffusivity(self, x):
        return self.qoi_floor + np.exp(self.true_log_diffusivity(x))

    def true_qoi(self, X):
        X = np.asarray(X, dtype=float)
        x = X[:, 0] if X.ndim == 2 else X
        return self.true_diffusivity(x)

    def qoi_metric_transform(self, v):
        xp = jnp if isinstance(v, jnp.ndarray) else np
        return xp.log(v - self.qoi_floor)

    def residual(self, u, q, X):
        return diffusion_residual(u, q[()], q, X, self.source)

    def collocation_points(self, shape=(50, 100)):
        return _grid(self.input_bounds, shape)

    def boundary_operators(self):
        t = np.linspace(0.0, self.horizon, self.boundary_points)
        x = np.linspace(0.0, 1.0, self.initial_points)
        return [
            BoundaryOperator("neumann-left", "neumann", np.c_[np.zeros_like(t), t], dim=0),
            BoundaryOperator("neumann-right", "neumann", np.c_[np.ones_like(t), t], dim=0),
            BoundaryOperator("initial", "dirichlet", np.c_[x, np.zeros_like(x)]),
        ]

    def to_dict(self):
        return {"kind": self.name, "profile": self.profile, "horizon": self.horizon,
                "source_centers": list(self.source_centers), "source_strength": self.source_strength,
                "source_variance": self.source_variance, "cutoff": self.cutoff, "qoi_floor": self.qoi_floor}


def boundary_operators(problem):
    return problem.boundary_operators()
