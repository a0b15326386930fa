"""Ensemble training, posterior statistics and the MC-dropout baseline."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ContractViolation, NumericalError
from .network import MlpArchitecture, NetworkParams, dropout_masks, forward, init_params
from .training import (AtConfig, DataPretrainer, JointTrainer, LossWeights, OptimConfig, PinnLoss,
                       PretrainConfig, TrainingSet)

log = logging.getLogger(__name__)

THREADS_ENV = "PINNENSEMBLE_THREADS"


def member_seeds(master_seed: int, count: int) -> list[int]:
    """Seed of member ``i`` depends only on ``(master_seed, i)``.

    So the first five members of a ten-member ensemble are the five-member
    ensemble for the same master seed.
    """
    return [int(np.random.SeedSequence([int(master_seed), i]).generate_state(1)[0]) for i in range(count)]


def worker_count(default=None):
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return default or os.cpu_count() or 1


@dataclass(frozen=True)
class EnsembleConfig:
    members: int = 5
    master_seed: int = 0
    at: bool = True
    seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.members < 1:
            raise ContractViolation("ensemble needs at least one member")
        s = self.member_seeds()
        if len(set(s)) != len(s):
            raise ContractViolation("member seeds must be pairwise distinct")

    def member_seeds(self):
        if self.seeds is not None:
            if len(self.seeds) != self.members:
                raise ContractViolation("one seed per member required")
            return list(self.seeds)
        return member_seeds(self.master_seed, self.members)


@dataclass(frozen=True)
class DropoutBaselineConfig:
    rate: float = 0.1
    samples: int = 100

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise ContractViolation("dropout rate must lie in (0, 1)")
        if self.samples < 2:
            raise ContractViolation("need at least two forward samples")


@dataclass
class Member:
    """One trained surrogate pair plus how it got there."""

    index: int
    seed: int
    u: NetworkParams | None
    q: NetworkParams | None
    trace: list = field(default_factory=list)
    pretrain_steps: int = 0
    pretrain_loss: float | None = None
    pretrain_status: str = "skipped"
    status: str = "ok"
    error: str | None = None

    @property
    def ok(self):
        return self.status == "ok"


@dataclass
class EnsembleResult:
    members: list

    @property
    def failures(self):
        return [m for m in self.members if not m.ok]

    @property
    def trained(self):
        return [m for m in self.members if m.ok]

    def failure_report(self):
        return [{"member": m.index, "seed": m.seed, "error": m.error} for m in self.failures]


@dataclass(frozen=True)
class MemberSettings:
    """Shared per-member training settings."""

    u_arch: MlpArchitecture
    q_arch: MlpArchitecture
    weights: LossWeights
    optim: OptimConfig
    pretrain: PretrainConfig
    at: AtConfig
    dropout_rate: float = 0.0


def architectures(problem, hidden_layers=4, hidden_width=20):
    """Observed-field and QoI network layouts for a problem."""
    u = MlpArchitecture(problem.input_dim, hidden_layers, hidden_width, 1,
                        input_bounds=tuple(problem.input_bounds))
    qb = tuple(problem.input_bounds[i] for i in problem.qoi_dims)
    q = MlpArchitecture(len(problem.qoi_dims), hidden_layers, hidden_width, 1, input_bounds=qb,
                        output_transform=problem.qoi_transform, output_floor=problem.qoi_floor)
    return u, q


def _split_seed(seed):
    a, b = np.random.SeedSequence(int(seed)).generate_state(2)
    return int(a), int(b)


class EnsembleTrainer:
    """Trains members that share one loss layout (compiled once)."""

    def __init__(self, problem, data: TrainingSet, settings: MemberSettings):
        self.problem = problem
        self.data = data
        self.settings = settings
        self.loss = PinnLoss(problem, data, settings.weights, settings.at, settings.dropout_rate)
        self.joint = JointTrainer(self.loss, settings.optim)
        tau = self.loss.tau if settings.at.enabled else None
        self.pretrainer = DataPretrainer(data.x_data, data.d_data, settings.optim, settings.pretrain, tau=tau)

    def initial(self, seed):
        su, sq = _split_seed(seed)
        return init_params(self.settings.u_arch, su), init_params(self.settings.q_arch, sq)

    def train_member(self, index, seed, steps=None, start=None, pretrain=True):
        """Train one member; failures are captured on the returned :class:`Member`."""
        steps = self.settings.optim.steps if steps is None else steps
        m = Member(index, seed, None, None)
        try:
            u, q = self.initial(seed) if start is None else start
            if pretrain and self.settings.pretrain.enabled:
                pr = self.pretrainer(u)
                u = pr.params
                m.pretrain_steps, m.pretrain_loss, m.pretrain_status = pr.steps, pr.loss, pr.status
                if not pr.reached:
                    log.warning("member %d: data loss %.3e above threshold after %d pretraining steps",
                                index, pr.loss, pr.steps)
            res = self.joint.train(u, q, steps, seed)
            m.u, m.q, m.trace = res.u, res.q, res.trace
        except NumericalError as exc:
            m.status, m.error = "diverged", str(exc)
            log.error("member %d diverged: %s", index, exc)
        return m

    def train_all(self, seeds, steps=None, starts=None, pretrain=True, threads=None):
        starts = starts or [None] * len(seeds)
        jobs = list(enumerate(zip(seeds, starts)))
        n = min(worker_count(threads), len(jobs))
        if n <= 1:
            members = [self.train_member(i, s, steps, st, pretrain) for i, (s, st) in jobs]
        else:
            with ThreadPoolExecutor(max_workers=n) as pool:
                members = list(pool.map(
                    lambda j: self.train_member(j[0], j[1][0], steps, j[1][1], pretrain), jobs))
        return EnsembleResult(members)


def train_ensemble(problem, data: TrainingSet, settings: MemberSettings, cfg: EnsembleConfig, threads=None):
    """Independently initialise and train ``cfg.members`` PINNs on the full data set."""
    if len(data.d_data) == 0:
        raise ContractViolation("observation set is empty")
    return EnsembleTrainer(problem, data, settings).train_all(cfg.member_seeds(), threads=threads)


# ---------------------------------------------------------------------------
# Posterior statistics
# ---------------------------------------------------------------------------

@dataclass
class PosteriorField:
    points: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    members: np.ndarray  # (M, N)

    @property
    def sigma(self):
        return np.sqrt(self.sigma2)

    def __len__(self):
        return len(self.mu)


def posterior_from_matrix(points, P) -> PosteriorField:
    """Evenly weighted mean and MLE (divisor M) variance of each column.

    Columns where all members agree get exactly that value and zero variance.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ContractViolation("posterior needs at least two members")
    M = P.shape[0]
    mu = P.sum(axis=0) / M
    sigma2 = np.sum((P - mu) ** 2, axis=0) / M
    agree = np.all(P == P[0], axis=0)
    mu[agree] = P[0, agree]
    sigma2[agree] = 0.0
    return PosteriorField(np.asarray(points, dtype=float), mu, sigma2, P)


def member_predictions(q_list, eval_points, transform=None):
    X = jnp.asarray(eval_points, dtype=float)
    rows = []
    for q in q_list:
        v = forward(q, X)[:, 0]
        rows.append(np.asarray(transform(v) if transform is not None else v))
    return np.stack(rows)


def posterior(q_list, eval_points, transform=None, points=None) -> PosteriorField:
    """Ensemble mean and variance of the QoI networks at ``eval_points``.

    ``transform`` maps raw network output into the reporting space (for the
    diffusivity, the log-diffusivity); ``points`` overrides the coordinates
    stored on the field.
    """
    if len(q_list) < 2:
        raise ContractViolation("posterior needs at least two members")
    P = member_predictions(q_list, eval_points, transform)
    return posterior_from_matrix(eval_points if points is None else points, P)


def credibility_band(field: PosteriorField, width: float = 2.0):
    s = np.sqrt(field.sigma2)
    return field.mu - width * s, field.mu + width * s


def mc_dropout_predict(q: NetworkParams, eval_points, samples=100, rate=0.1, seed=0,
                       transform=None, points=None) -> PosteriorField:
    """Stochastic forward passes with fresh dropout masks, aggregated like an ensemble."""
    if samples < 2:
        raise ContractViolation("need at least two forward samples")
    X = jnp.asarray(eval_points, dtype=float)
    keys = jax.random.split(jax.random.PRNGKey(seed), samples)

    def one(k):
        masks = dropout_masks(k, X.shape[0], q.arch, rate) if rate > 0 else None
        v = forward(q, X, masks)[:, 0]
        return transform(v) if transform is not None else v

    P = np.asarray(jax.jit(jax.vmap(one))(keys))
    return posterior_from_matrix(eval_points if points is None else points, P)
