"""Composite PINN loss, FGM adversarial samples, Adam and the training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .autodiff import taylor_forward
from .errors import ContractViolation, NumericalError, TrainingDivergence
from .network import NetworkParams, dropout_masks, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    data: float = 1.0
    pde: float = 1.0
    bc: float = 1.0

    def __post_init__(self):
        w = (self.data, self.pde, self.bc)
        if min(w) < 0 or max(w) <= 0:
            raise ContractViolation(f"loss weights must be >= 0 with one > 0: {w}")


@dataclass(frozen=True)
class AtConfig:
    enabled: bool = True
    tau: float | None = None  # None: 1% of the smallest input range

    def resolve_tau(self, input_bounds):
        if self.tau is not None:
            if self.enabled and self.tau <= 0:
                raise ContractViolation("tau must be > 0 when adversarial training is enabled")
            return float(self.tau)
        return 0.01 * min(hi - lo for lo, hi in input_bounds)


@dataclass(frozen=True)
class PretrainConfig:
    enabled: bool = True
    delta: float = 1e-4
    max_steps: int = 20000
    adversarial: bool = False

    def __post_init__(self):
        if self.delta <= 0:
            raise ContractViolation("pretraining threshold must be > 0")


@dataclass(frozen=True)
class OptimConfig:
    lr_u: float = 0.003
    lr_q: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 100000
    trace_every: int = 500


class AdamState(NamedTuple):
    count: jnp.ndarray
    m: object
    v: object
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(jnp.zeros((), jnp.int32), zeros, zeros, lr, beta1, beta2, eps)


def _adam_update(params, grads, state: AdamState):
    t = state.count + 1
    b1, b2 = state.beta1, state.beta2
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grads)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = jax.tree_util.tree_map(
        lambda p, m, v: p - state.lr * (m / c1) / (jnp.sqrt(v / c2) + state.eps), params, m, v)
    return new, state._replace(count=t, m=m, v=v)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; refuses non-finite gradients."""
    leaves = jax.tree_util.tree_leaves(grads)
    if len(leaves) != len(jax.tree_util.tree_leaves(params)):
        raise ContractViolation("gradient structure does not match parameters")
    if not all(bool(jnp.all(jnp.isfinite(g))) for g in leaves):
        raise NumericalError("non-finite gradient; Adam step aborted")
    return _adam_update(params, grads, state)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _mse(r):
    return jnp.mean(r * r)


def loss_data(u_params, X, d):
    if len(d) == 0:
        raise ContractViolation("observation set is empty")
    return _mse(forward(u_params, jnp.asarray(X))[:, 0] - jnp.asarray(d))


def fgm_perturbation(grad_x, tau):
    """Row-wise ``tau * g / ||g||_2``; rows with zero gradient are left at 0."""
    if tau <= 0:
        raise ContractViolation("tau must be > 0")
    g = jnp.asarray(grad_x)
    # scale by the largest entry first so tiny or huge gradients neither underflow nor overflow
    peak = jnp.max(jnp.abs(g), axis=-1, keepdims=True)
    unit = g / jnp.where(peak > 0, peak, 1.0)
    norm = jnp.sqrt(jnp.sum(unit * unit, axis=-1, keepdims=True))
    return jnp.where(peak > 0, tau * unit / jnp.where(peak > 0, norm, 1.0), 0.0)


def data_input_gradient(u_params, X, d):
    """Per-sample gradient of the squared data error with respect to the input."""
    d = jnp.asarray(d)
    return jax.grad(lambda Z: jnp.sum((forward(u_params, Z)[:, 0] - d) ** 2))(jnp.asarray(X))


def loss_adversarial(u_params, X, d, tau):
    X = jnp.asarray(X)
    dx = jax.lax.stop_gradient(fgm_perturbation(data_input_gradient(u_params, X, d), tau))
    return loss_data(u_params, X + dx, d)


def _qoi_channels(q_params, Xq, orders, masks=None):
    return {k: v[:, 0] for k, v in taylor_forward(q_params, Xq, orders, masks).items()}


def loss_pde(u_params, q_params, collocation, problem, check=True):
    """Mean squared residual over collocation points (eager form)."""
    X = jnp.asarray(collocation)
    if X.shape[0] == 0:
        raise ContractViolation("collocation set is empty")
    if X.shape[1] != problem.input_dim:
        raise ContractViolation("collocation dimension does not match the problem")
    u = {k: v[:, 0] for k, v in taylor_forward(u_params, X, problem.u_orders).items()}
    q = _qoi_channels(q_params, X[:, list(problem.qoi_dims)], problem.q_orders)
    r = problem.residual(u, q, X)
    if check:
        bad = ~jnp.isfinite(r)
        if bool(jnp.any(bad)):
            i = int(jnp.argmax(bad))
            raise NumericalError(f"non-finite PDE residual at point {np.asarray(X[i]).tolist()}")
    return _mse(r)


def boundary_residuals(u_params, ops):
    res = []
    for op in ops:
        derivs = {k: v[:, 0] for k, v in taylor_forward(u_params, jnp.asarray(op.points), op.orders).items()}
        res.append(op.residual(derivs))
    return jnp.concatenate(res)


def loss_bc(u_params, ops, check=True):
    if not ops:
        raise ContractViolation("no boundary points")
    r = boundary_residuals(u_params, ops)
    if check and not bool(jnp.all(jnp.isfinite(r))):
        raise NumericalError("non-finite boundary residual")
    return _mse(r)


# ---------------------------------------------------------------------------
# Assembled loss used by the trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainingSet:
    """Everything a member trains on (shared by all members)."""

    x_data: np.ndarray
    d_data: np.ndarray
    collocation: np.ndarray
    boundary: list
    qoi_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    qoi_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def with_qoi(self, points, values):
        return TrainingSet(self.x_data, self.d_data, self.collocation, self.boundary,
                           np.asarray(points, float), np.asarray(values, float))


class PinnLoss:
    """Device-resident loss for one problem and training set.

    The QoI network is evaluated once per distinct QoI input (for the 1D
    diffusivity that is one value per spatial grid line) and gathered back.
    """

    def __init__(self, problem, data: TrainingSet, weights: LossWeights, at: AtConfig,
                 dropout_rate: float = 0.0):
        self.problem = problem
        self.weights = weights
        self.at_enabled = bool(at.enabled)
        self.tau = at.resolve_tau(problem.input_bounds)
        self.dropout_rate = float(dropout_rate)
        if len(data.d_data) == 0:
            raise ContractViolation("observation set is empty")
        self.X = jnp.asarray(data.x_data, dtype=float)
        self.d = jnp.asarray(data.d_data, dtype=float)
        self.Xc = jnp.asarray(data.collocation, dtype=float)
        qin = np.asarray(data.collocation)[:, list(problem.qoi_dims)]
        uniq, inv = np.unique(qin, axis=0, return_inverse=True)
        self.Xq = jnp.asarray(uniq)
        self.q_inv = jnp.asarray(np.ravel(inv))
        self.bc = list(data.boundary)
        self.bc_pts = [jnp.asarray(op.points, dtype=float) for op in self.bc]
        self.has_qoi = len(data.qoi_values) > 0
        self.Xs = jnp.asarray(data.qoi_points, dtype=float)
        self.ms = jnp.asarray(data.qoi_values, dtype=float)

    def _masks(self, key, n, arch):
        if self.dropout_rate <= 0 or key is None:
            return None
        return dropout_masks(key, n, arch, self.dropout_rate)

    def components(self, u_params, q_params, key=None):
        p = self.problem
        out = {"data": _mse(forward(u_params, self.X)[:, 0] - self.d)}
        if self.at_enabled:
            out["at"] = loss_adversarial(u_params, self.X, self.d, self.tau)
        u = {k: v[:, 0] for k, v in taylor_forward(u_params, self.Xc, p.u_orders).items()}
        k1 = k2 = None
        if key is not None:
            k1, k2 = jax.random.split(key)
        q = _qoi_channels(q_params, self.Xq, p.q_orders, self._masks(k1, self.Xq.shape[0], q_params.arch))
        q = {k: v[self.q_inv] for k, v in q.items()}
        out["pde"] = _mse(p.residual(u, q, self.Xc))
        res = []
        for op, pts in zip(self.bc, self.bc_pts):
            derivs = {k: v[:, 0] for k, v in taylor_forward(u_params, pts, op.orders).items()}
            res.append(op.residual(derivs))
        out["bc"] = _mse(jnp.concatenate(res))
        if self.has_qoi:
            qs = forward(q_params, self.Xs, self._masks(k2, self.Xs.shape[0], q_params.arch))[:, 0]
            out["qoi"] = _mse(p.qoi_metric_transform(qs) - self.ms)
        return out

    def total_from(self, comps):
        w = self.weights
        total = w.data * comps["data"] + w.pde * comps["pde"] + w.bc * comps["bc"]
        if "at" in comps:
            total = total + w.data * comps["at"]
        if "qoi" in comps:
            total = total + w.data * comps["qoi"]
        return total

    def total(self, u_params, q_params, key=None):
        return self.total_from(self.components(u_params, q_params, key))


def total_loss(u_params, q_params, problem, data: TrainingSet, weights: LossWeights, at: AtConfig):
    """Eager weighted sum of all loss terms (see :class:`PinnLoss`)."""
    return PinnLoss(problem, data, weights, at).total(u_params, q_params)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    params: NetworkParams
    loss: float
    steps: int
    reached: bool

    @property
    def status(self):
        return "ok" if self.reached else "warning: threshold not reached"


def _all_finite(tree):
    return jnp.all(jnp.array([jnp.all(jnp.isfinite(x)) for x in jax.tree_util.tree_leaves(tree)]))


class DataPretrainer:
    """Adam on the data loss alone until it drops below ``delta``.

    Once the threshold is met inside a chunk the remaining updates of that
    chunk are masked out, so ``steps`` counts exactly the updates applied.
    """

    def __init__(self, X, d, optim: OptimConfig, cfg: PretrainConfig, tau=None, chunk=250):
        self.X = jnp.asarray(X, float)
        self.d = jnp.asarray(d, float)
        if self.X.shape[0] == 0:
            raise ContractViolation("observation set is empty")
        self.optim = optim
        self.cfg = cfg
        self.chunk = chunk
        self._compiled = {}
        use_at = cfg.adversarial and tau is not None

        def objective(u):
            l = loss_data(u, self.X, self.d)
            return l + loss_adversarial(u, self.X, self.d, tau) if use_at else l

        def body(carry, _):
            u, st, done, bad = carry
            done = done | (loss_data(u, self.X, self.d) < cfg.delta)
            l, g = jax.value_and_grad(objective)(u)
            ok = _all_finite(g) & jnp.isfinite(l)
            nu, nst = _adam_update(u, g, st)
            upd = (~done) & ok
            u = jax.tree_util.tree_map(lambda a, b: jnp.where(upd, a, b), nu, u)
            st = jax.tree_util.tree_map(lambda a, b: jnp.where(upd, a, b), nst, st)
            return (u, st, done, bad | ((~done) & ~ok)), None

        self._body = body
        self._loss = jax.jit(lambda u: loss_data(u, self.X, self.d))

    def _runner(self, n):
        if n not in self._compiled:
            body = self._body
            self._compiled[n] = jax.jit(lambda c: jax.lax.scan(body, c, None, length=n)[0])
        return self._compiled[n]

    def __call__(self, u_params: NetworkParams) -> PretrainResult:
        o = self.optim
        st = adam_init(u_params, o.lr_u, o.beta1, o.beta2, o.eps)
        carry = (u_params, st, jnp.array(False), jnp.array(False))
        while True:
            steps = int(carry[1].count)
            if bool(carry[2]) or float(self._loss(carry[0])) < self.cfg.delta or steps >= self.cfg.max_steps:
                break
            carry = self._runner(min(self.chunk, self.cfg.max_steps - steps))(carry)
            if bool(carry[3]):
                raise TrainingDivergence(f"non-finite data loss during pretraining near step {int(carry[1].count)}",
                                         int(carry[1].count))
        l = float(self._loss(carry[0]))
        return PretrainResult(carry[0], l, int(carry[1].count), l < self.cfg.delta)


def pretrain_data_net(u_params, observations, cfg: PretrainConfig, optim: OptimConfig = OptimConfig()):
    """Fit the observed-field network to the data alone (hierarchical first stage)."""
    return DataPretrainer(observations.points, observations.values, optim, cfg)(u_params)


@dataclass
class TrainResult:
    u: NetworkParams
    q: NetworkParams
    trace: list
    steps: int


class JointTrainer:
    """Full-batch Adam on the composite loss, compiled once per loss layout.

    Steps run in jitted chunks of ``optim.trace_every``; one trace record is
    emitted per chunk.  A non-finite gradient freezes the parameters and the
    chunk's end raises :class:`TrainingDivergence` naming the step.
    """

    def __init__(self, loss: PinnLoss, optim: OptimConfig):
        self.loss = loss
        self.optim = optim
        self._compiled = {}

        def body(carry, _):
            u, q, su, sq, key, bad_step = carry
            key, sub = jax.random.split(key)
            k = sub if loss.dropout_rate > 0 else None
            lval, (gu, gq) = jax.value_and_grad(lambda a, b: loss.total(a, b, k), argnums=(0, 1))(u, q)
            ok = _all_finite((gu, gq)) & jnp.isfinite(lval)
            nu, nsu = _adam_update(u, gu, su)
            nq, nsq = _adam_update(q, gq, sq)
            sel = lambda a, b: jax.tree_util.tree_map(lambda x, y: jnp.where(ok, x, y), a, b)
            bad_step = jnp.where((bad_step < 0) & ~ok, su.count, bad_step)
            return (sel(nu, u), sel(nq, q), sel(nsu, su), sel(nsq, sq), key, bad_step), lval

        self._body = body
        self._components = jax.jit(lambda u, q: loss.components(u, q, None))

    def _runner(self, n):
        if n not in self._compiled:
            body = self._body
            self._compiled[n] = jax.jit(lambda c: jax.lax.scan(body, c, None, length=n)[0])
        return self._compiled[n]

    def components(self, u, q):
        return {k: float(v) for k, v in self._components(u, q).items()}

    def train(self, u: NetworkParams, q: NetworkParams, steps: int, seed: int = 0,
              callback=None) -> TrainResult:
        o = self.optim
        su = adam_init(u, o.lr_u, o.beta1, o.beta2, o.eps)
        sq = adam_init(q, o.lr_q, o.beta1, o.beta2, o.eps)
        carry = (u, q, su, sq, jax.random.PRNGKey(seed), jnp.array(-1, jnp.int32))
        trace = [self._record(0, u, q)]
        done = 0
        while done < steps:
            n = min(o.trace_every, steps - done)
            carry = self._runner(n)(carry)
            bad = int(carry[5])
            if bad >= 0:
                raise TrainingDivergence(f"non-finite loss or gradient at step {bad + 1}", bad + 1)
            done += n
            trace.append(self._record(done, carry[0], carry[1]))
            if callback is not None:
                callback(trace[-1], carry[0], carry[1])
        return TrainResult(carry[0], carry[1], trace, done)

    def _record(self, step, u, q):
        comps = self.components(u, q)
        rec = {"step": step, **comps}
        rec["total"] = float(self.loss.total_from(comps))
        if not np.isfinite(rec["total"]):
            raise TrainingDivergence(f"non-finite total loss at step {step}", step)
        return rec
