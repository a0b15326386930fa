"""Variance-guided acquisition of direct QoI measurements.

Each iteration looks at the ensemble spread over a fixed candidate grid,
measures the QoI exactly where the variance peaks, adds that measurement to
every member's loss and warm-starts retraining.  The loop stops once the
largest standard deviation falls below ``alpha`` times the range of the
ensemble mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ensemble import EnsembleTrainer, MemberSettings, PosteriorField, posterior
from .errors import ContractViolation
from .metrics import r_squared, relative_l2
from .training import TrainingSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AsConfig:
    alpha: float = 0.02
    max_iterations: int = 15
    retrain_steps: int = 10000

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractViolation("alpha must be positive")
        if self.max_iterations < 1:
            raise ContractViolation("max_iterations must be at least 1")
        if self.retrain_steps < 0:
            raise ContractViolation("retrain_steps must be non-negative")


@dataclass
class AsRecord:
    iteration: int
    x_s: np.ndarray
    m_s: float
    index: int
    max_sigma_before: float
    max_sigma_after: float
    eta: float
    r2: float
    rel_l2: float
    sigma2_before: np.ndarray = field(repr=False)

    def row(self):
        x = np.atleast_1d(self.x_s)
        return {"iteration": self.iteration, **{f"x_s{i}": float(v) for i, v in enumerate(x)},
                "m_s": self.m_s, "max_sigma_before": self.max_sigma_before,
                "max_sigma_after": self.max_sigma_after, "eta": self.eta,
                "r2": self.r2, "rel_l2": self.rel_l2}


@dataclass
class AsTrace:
    """Per-iteration acquisitions plus the stopping outcome.

    ``final_eta`` and ``final_max_sigma`` belong to the check that ended the
    loop; ``converged`` is False when the iteration cap fired first.
    """

    records: list = field(default_factory=list)
    converged: bool = False
    final_eta: float = float("nan")
    final_max_sigma: float = float("nan")
    initial_r2: float = float("nan")
    initial_rel_l2: float = float("nan")

    def __len__(self):
        return len(self.records)

    def append(self, rec: AsRecord):
        if self.records and rec.iteration != self.records[-1].iteration + 1:
            raise ContractViolation("iterations must be appended in order")
        self.records.append(rec)

    def rows(self):
        return [r.row() for r in self.records]

    @property
    def acquired(self):
        return [r.index for r in self.records]


def _order(points):
    """Indices sorting points by coordinate (first column most significant)."""
    P = np.asarray(points, dtype=float).reshape(len(points), -1)
    return np.lexsort(P.T[::-1])


def acquisition_index(field: PosteriorField, exclude=()) -> int:
    """Index of the largest variance; ties go to the lowest coordinates."""
    if len(field) == 0:
        raise ContractViolation("posterior field is empty")
    s2 = np.array(field.sigma2, dtype=float)
    excl = np.asarray(list(exclude), dtype=int)
    if len(excl):
        s2[excl] = -np.inf
    if not np.any(np.isfinite(s2)):
        raise ContractViolation("every candidate point has already been acquired")
    order = _order(field.points)
    return int(order[np.argmax(s2[order])])


def acquisition_point(field: PosteriorField, exclude=()):
    return field.points[acquisition_index(field, exclude)]


def stop_threshold(field: PosteriorField, alpha: float) -> float:
    """``eta = alpha * (max mu - min mu)``."""
    if len(field) == 0:
        raise ContractViolation("posterior field is empty")
    spread = float(np.max(field.mu) - np.min(field.mu))
    if spread == 0.0:
        log.warning("ensemble mean is flat; stop threshold is zero")
    return alpha * spread


def _should_stop(max_sigma, eta):
    return max_sigma < eta or max_sigma == 0.0


def run_active_sampling(problem, data: TrainingSet, settings: MemberSettings, members, candidates,
                        truth, cfg: AsConfig, on_iteration=None, threads=None):
    """Acquire-and-retrain loop.

    Parameters
    ----------
    problem
        Problem definition; supplies ``qoi_metric_transform``.
    data
        Training set the ensemble was fitted on (acquisitions are appended).
    settings
        Per-member settings, reused for retraining.
    members : list of Member
        Trained members; their ``u``/``q`` are the warm starts.
    candidates : ndarray, shape (N, len(problem.qoi_dims))
        Fixed grid searched for the variance maximum.
    truth : callable
        Exact QoI in metric space at candidate points (the noise-free sensor).
    cfg : AsConfig

    Returns
    -------
    members : list of Member
        Retrained members (the input list if nothing was acquired).
    trace : AsTrace
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim == 1:
        candidates = candidates[:, None]
    m_true = np.asarray(truth(candidates), dtype=float)
    transform = problem.qoi_metric_transform
    members = [m for m in members if m.ok]
    if len(members) < 2:
        raise ContractViolation("active sampling needs at least two trained members")

    def field_of(ms):
        return posterior([m.q for m in ms], candidates, transform)

    current = field_of(members)
    trace = AsTrace(initial_r2=r_squared(current.mu, m_true), initial_rel_l2=relative_l2(current.mu, m_true))
    xs_all, ms_all = [], []
    seeds = [m.seed for m in members]
    for it in range(1, cfg.max_iterations + 2):
        eta = stop_threshold(current, cfg.alpha)
        max_sigma = float(np.sqrt(np.max(current.sigma2)))
        trace.final_eta, trace.final_max_sigma = eta, max_sigma
        if _should_stop(max_sigma, eta):
            trace.converged = True
            break
        if it > cfg.max_iterations:
            log.warning("active sampling hit the iteration cap with max sigma %.4g >= eta %.4g", max_sigma, eta)
            break
        idx = acquisition_index(current, trace.acquired)
        x_s = candidates[idx]
        m_s = float(m_true[idx])
        xs_all.append(x_s)
        ms_all.append(m_s)
        trainer = EnsembleTrainer(problem, data.with_qoi(np.array(xs_all), np.array(ms_all)), settings)
        res = trainer.train_all(seeds, steps=cfg.retrain_steps, starts=[(m.u, m.q) for m in members],
                                pretrain=False, threads=threads)
        for old, new in zip(members, res.members):
            new.index = old.index
        if res.failures:
            log.error("active sampling iteration %d: %d member(s) diverged", it, len(res.failures))
        members = res.trained
        if len(members) < 2:
            raise ContractViolation("fewer than two members survived retraining")
        seeds = [m.seed for m in members]
        before = current
        current = field_of(members)
        rec = AsRecord(it, x_s.copy(), m_s, idx, max_sigma, float(np.sqrt(np.max(current.sigma2))), eta,
                       r_squared(current.mu, m_true), relative_l2(current.mu, m_true), before.sigma2.copy())
        trace.append(rec)
        log.info("AS iteration %d: x_s=%s m_s=%.4f max sigma %.4g -> %.4g (eta %.4g) R2 %.4f",
                 it, np.round(x_s, 4), m_s, rec.max_sigma_before, rec.max_sigma_after, eta, rec.r2)
        if on_iteration is not None:
            on_iteration(rec, members)
    return members, trace
