"""Finite-difference forward solvers, random fields and synthetic sensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, SolverError


@dataclass(frozen=True)
class Grid2D:
    x: np.ndarray
    y: np.ndarray
    values: np.ndarray  # shape (len(x), len(y)), indexing="ij"

    @property
    def h(self):
        return self.x[1] - self.x[0]

    def points(self):
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        return np.c_[X.ravel(), Y.ravel()]


@dataclass(frozen=True)
class Grid1DTime:
    x: np.ndarray
    t: np.ndarray
    values: np.ndarray  # shape (len(x), len(t))

    @property
    def h(self):
        return self.x[1] - self.x[0]

    @property
    def dt(self):
        return self.t[1] - self.t[0]

    def points(self):
        X, T = np.meshgrid(self.x, self.t, indexing="ij")
        return np.c_[X.ravel(), T.ravel()]


# ---------------------------------------------------------------------------
# Poisson
# ---------------------------------------------------------------------------

def _laplacian_1d(n, h):
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1]) / h**2


def poisson_dirichlet(source, lam, n, tol=1e-10):
    """Solve ``lam * lap(u) = -source`` on the unit square, ``u = 0`` on the edge.

    ``source(X, Y)`` is evaluated on the ``n x n`` node grid.  Returns a
    :class:`Grid2D` including boundary nodes.
    """
    if n < 3:
        raise ContractViolation("grid needs at least 3 nodes per axis")
    x = np.linspace(0.0, 1.0, n)
    h = x[1] - x[0]
    m = n - 2
    L = _laplacian_1d(m, h)
    I = sp.identity(m)
    A = (lam * (sp.kron(L, I) + sp.kron(I, L))).tocsc()
    Xi, Yi = np.meshgrid(x[1:-1], x[1:-1], indexing="ij")
    rhs = -np.asarray(source(Xi, Yi), dtype=float).ravel()
    u_in = spla.spsolve(A, rhs)
    res = np.linalg.norm(A @ u_in - rhs) / max(1.0, np.linalg.norm(rhs))
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"Poisson solve residual {res:.3e} exceeds {tol:.1e}")
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = u_in.reshape(m, m)
    return Grid2D(x, x.copy(), u)


def solve_poisson_2d(problem, n=50, refine=4):
    """Oracle field of the source problem on an ``n x n`` node grid.

    The system is solved on a grid refined ``refine`` times and restricted
    back to the requested nodes.
    """
    nf = (n - 1) * refine + 1

    def src(X, Y):
        return problem.true_qoi(np.c_[X.ravel(), Y.ravel()]).reshape(X.shape)

    fine = poisson_dirichlet(src, problem.lam, nf)
    return Grid2D(fine.x[::refine], fine.y[::refine], fine.values[::refine, ::refine].copy())


# ---------------------------------------------------------------------------
# Transient diffusion
# ---------------------------------------------------------------------------

def _flux_matrix(v_nodes, h):
    """Conservative ``d/dx(v du/dx)`` with zero-flux ghost nodes."""
    n = len(v_nodes)
    vf = 0.5 * (v_nodes[1:] + v_nodes[:-1])  # face values v_{i+1/2}
    lower = np.zeros(n - 1)
    upper = np.zeros(n - 1)
    main = np.zeros(n)
    upper[:] = vf
    lower[:] = vf
    main[:-1] -= vf
    main[1:] -= vf
    # mirrored ghost node doubles the single interior face at each end
    upper[0] *= 2.0
    lower[-1] *= 2.0
    main[0] = -2.0 * vf[0]
    main[-1] = -2.0 * vf[-1]
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csc") / h**2


def crank_nicolson_1d(v_nodes, source, x, t, u0=None):
    """Crank-Nicolson march of ``u_t = (v u_x)_x + S`` with adiabatic ends.

    ``source(x, t)`` returns nodal values; it is averaged between the two
    time levels.  Returns an array ``(len(x), len(t))``.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    v_nodes = np.asarray(v_nodes, dtype=float)
    h = x[1] - x[0]
    dt = t[1] - t[0]
    if np.any(v_nodes <= 0):
        raise ContractViolation("diffusivity must be positive on every node")
    A = _flux_matrix(v_nodes, h)
    I = sp.identity(len(x), format="csc")
    lhs = spla.splu((I - 0.5 * dt * A).tocsc())
    rhs_op = (I + 0.5 * dt * A).tocsr()
    u = np.zeros((len(x), len(t)))
    u[:, 0] = 0.0 if u0 is None else u0
    s_prev = source(x, t[0])
    for k in range(len(t) - 1):
        s_next = source(x, t[k + 1])
        u[:, k + 1] = lhs.solve(rhs_op @ u[:, k] + 0.5 * dt * (s_prev + s_next))
        if not np.all(np.isfinite(u[:, k + 1])):
            raise SolverError(f"non-finite diffusion state at step {k + 1}")
        s_prev = s_next
    return u


def trapezoid_mass(u_col, h):
    """Quantity conserved exactly by the ghost-node scheme (half weights at the ends)."""
    return h * (np.sum(u_col) - 0.5 * (u_col[0] + u_col[-1]))


def solve_diffusion_1d(problem, nx=49, nt=301, refine_x=4, refine_t=4):
    """Oracle field of the diffusion problem on an ``nx x nt`` node grid.

    Solved on a grid refined in space and time, then restricted.  Source
    switching uses the node time of each level, so the pulse is active on
    ``t < cutoff``.
    """
    nxf = (nx - 1) * refine_x + 1
    ntf = (nt - 1) * refine_t + 1
    xf = np.linspace(0.0, 1.0, nxf)
    # integer-indexed times avoid round-off at the cutoff
    tf = np.arange(ntf) * (problem.horizon / (ntf - 1))
    v = problem.true_diffusivity(xf)
    if np.any(v <= problem.qoi_floor):
        raise ContractViolation("diffusivity must exceed its floor on every node")
    u = crank_nicolson_1d(v, problem.source, xf, tf)
    return Grid1DTime(xf[::refine_x].copy(), np.linspace(0.0, problem.horizon, nt), u[::refine_x, ::refine_t].copy())


# ---------------------------------------------------------------------------
# Gaussian random fields
# ---------------------------------------------------------------------------

def squared_exponential(x1, x2, length_scale=0.3):
    d = np.subtract.outer(np.asarray(x1, float), np.asarray(x2, float))
    return np.exp(-0.5 * d**2 / length_scale**2)


def _jittered_cholesky(K, jitter=1e-10, max_jitter=1e-6):
    j = jitter
    while j <= max_jitter * (1 + 1e-12):
        try:
            return np.linalg.cholesky(K + j * np.eye(len(K))), j
        except np.linalg.LinAlgError:
            j *= 10.0
    raise SolverError(f"covariance not factorisable with jitter up to {max_jitter:g}")


def sample_grf(nodes, length_scale=0.3, seed=0, n_samples=None, jitter=1e-10):
    """Zero-mean GP draw(s) on ``nodes`` by Cholesky factorisation."""
    nodes = np.asarray(nodes, dtype=float)
    if nodes.size == 0:
        raise ContractViolation("grid is empty")
    L, _ = _jittered_cholesky(squared_exponential(nodes, nodes, length_scale), jitter)
    rng = np.random.default_rng(seed)
    if n_samples is None:
        return L @ rng.standard_normal(len(nodes))
    return (L @ rng.standard_normal((len(nodes), n_samples))).T


@dataclass(frozen=True)
class GaussianRandomField:
    """A stored GP sample, interpolated off-node by its conditional mean."""

    nodes: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    length_scale: float = 0.3
    seed: int = 0
    jitter: float = 1e-10

    @classmethod
    def sample(cls, nodes, length_scale=0.3, seed=0):
        nodes = np.asarray(nodes, dtype=float)
        return cls(nodes, sample_grf(nodes, length_scale, seed), length_scale, seed)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        L, _ = _jittered_cholesky(squared_exponential(self.nodes, self.nodes, self.length_scale), self.jitter)
        w = scipy.linalg.cho_solve((L, True), self.values)
        out = squared_exponential(x.ravel(), self.nodes, self.length_scale) @ w
        # snap exactly onto stored values at the nodes
        idx = np.searchsorted(self.nodes, x.ravel())
        idx = np.clip(idx, 0, len(self.nodes) - 1)
        hit = np.isclose(self.nodes[idx], x.ravel(), rtol=0, atol=1e-12)
        out[hit] = self.values[idx[hit]]
        return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# Sensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ContractViolation("noise std must be >= 0")


@dataclass(frozen=True)
class SensorLayout:
    """Sensor positions as integer node indices into an oracle grid."""

    indices: np.ndarray = field(repr=False)  # (N, grid_ndim) ints

    def __len__(self):
        return len(self.indices)

    @classmethod
    def diffusion_default(cls, grid: Grid1DTime, spacing=1.0 / 12.0, t_window=(0.01, 0.03), n_times=9):
        xs = np.arange(0.0, 1.0 + 1e-12, spacing)
        ts = np.linspace(t_window[0], t_window[1], n_times)
        ix = [_node_index(grid.x, v) for v in xs]
        it = [_node_index(grid.t, v) for v in ts]
        return cls(np.array([(i, j) for i in ix for j in it], dtype=int))

    @classmethod
    def random_nodes(cls, shape, count, seed):
        rng = np.random.default_rng(seed)
        flat = rng.choice(int(np.prod(shape)), size=count, replace=False)
        return cls(np.stack(np.unravel_index(np.sort(flat), shape), axis=1).astype(int))


def _node_index(axis, value):
    i = int(np.argmin(np.abs(axis - value)))
    if not np.isclose(axis[i], value, rtol=0, atol=1e-9 * max(1.0, abs(value))):
        raise ContractViolation(f"sensor coordinate {value} is not on a grid node")
    return i


@dataclass(frozen=True)
class ObservationSet:
    """Noisy sensor readings ``values`` at ``points``; ``truth`` is the noise-free field."""

    points: np.ndarray
    values: np.ndarray
    truth: np.ndarray
    noise: NoiseSpec = NoiseSpec()

    def __len__(self):
        return len(self.values)


def observe(grid, layout: SensorLayout, noise: NoiseSpec) -> ObservationSet:
    """``d = u_true(sensor) + xi`` with i.i.d. Gaussian ``xi``."""
    axes = (grid.x, grid.y) if isinstance(grid, Grid2D) else (grid.x, grid.t)
    idx = np.asarray(layout.indices)
    if idx.ndim != 2 or idx.shape[1] != 2:
        raise ContractViolation("layout indices must be (N, 2)")
    for k, ax in enumerate(axes):
        if np.any(idx[:, k] < 0) or np.any(idx[:, k] >= len(ax)):
            raise ContractViolation("sensor index outside the grid")
    pts = np.c_[axes[0][idx[:, 0]], axes[1][idx[:, 1]]]
    truth = grid.values[idx[:, 0], idx[:, 1]]
    rng = np.random.default_rng(noise.seed)
    d = truth + noise.std * rng.standard_normal(len(truth))
    return ObservationSet(pts, d, truth, noise)


def observe_points(grid, points, noise: NoiseSpec) -> ObservationSet:
    """Like :func:`observe` but with coordinates; every point must be a node."""
    axes = (grid.x, grid.y) if isinstance(grid, Grid2D) else (grid.x, grid.t)
    pts = np.asarray(points, dtype=float)
    idx = np.array([[_node_index(ax, p[k]) for k, ax in enumerate(axes)] for p in pts], dtype=int)
    return observe(grid, SensorLayout(idx), noise)
