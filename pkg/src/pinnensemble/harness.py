"""Experiment orchestration: generate, train, evaluate, sample, report.

A run writes into one output directory::

    config.json            the resolved configuration (with digest)
    observations.csv       sensor data (+ .json sidecar)
    checkpoint.json        trained members
    traces.csv             loss terms per member and trace step
    posterior.csv          mu, sigma2 and member predictions on the truth grid
    metrics.json           accuracy and final loss terms (deterministic)
    timing.json            wall-clock per stage (kept apart so metrics.json is reproducible)
    as_trace.csv, checkpoint_active.json, posterior_active.csv, metrics_active.json
                           written by the active-sampling stage
    FAILED                 marker naming the failing stage, if any
"""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .active import AsConfig, run_active_sampling
from .config import ExperimentConfig
from .ensemble import (EnsembleTrainer, Member, MemberSettings, architectures, credibility_band,
                       mc_dropout_predict, member_seeds, posterior, posterior_from_matrix)
from .errors import CheckpointError, ContractViolation, StageError
from .io import (load_checkpoint, save_checkpoint, write_as_trace, write_observations, write_posterior,
                 write_training_traces)
from .metrics import band_coverage, r_squared, relative_l2
from .oracle import (GaussianRandomField, NoiseSpec, SensorLayout, observe, solve_diffusion_1d,
                     solve_poisson_2d)
from .problems import DiffusionProblem, SourceProblem
from .training import TrainingSet

log = logging.getLogger(__name__)

FAILED_MARKER = "FAILED"
# fixed stream ids mixed with the master seed so each random source is independent
_STREAM_NOISE, _STREAM_SENSORS, _STREAM_DROPOUT = 101, 102, 103


def _stream_seed(master, stream):
    return int(np.random.SeedSequence([int(master), stream]).generate_state(1)[0])


@dataclass
class Generated:
    problem: object
    grid: object
    observations: object
    data: TrainingSet
    eval_points: np.ndarray  # inputs of the QoI network
    truth: np.ndarray  # QoI on eval_points, in metric space


@dataclass
class RunResult:
    out: Path | None
    metrics: dict
    members: list
    field: object
    generated: Generated
    active_metrics: dict | None = None
    trace: object = None
    timing: dict | None = None


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def build_problem(cfg: ExperimentConfig):
    pc = cfg.problem
    if pc.kind == "source2d":
        return SourceProblem(boundary_points_per_side=pc.boundary_points)
    if pc.profile == "sinusoidal":
        return DiffusionProblem(horizon=pc.horizon, boundary_points=pc.boundary_points,
                                initial_points=pc.initial_points)
    nodes = np.linspace(0.0, 1.0, pc.oracle_shape[0])
    field = GaussianRandomField.sample(nodes, pc.grf_length_scale, pc.grf_seed)
    return DiffusionProblem(profile="grf", log_diffusivity=field, horizon=pc.horizon,
                            boundary_points=pc.boundary_points, initial_points=pc.initial_points)


def generate(cfg: ExperimentConfig) -> Generated:
    """Truth field, noisy sensors and the training point sets."""
    pc = cfg.problem
    problem = build_problem(cfg)
    noise = NoiseSpec(pc.noise_std, _stream_seed(cfg.master_seed, _STREAM_NOISE))
    if pc.kind == "source2d":
        grid = solve_poisson_2d(problem, n=pc.oracle_shape[0], refine=pc.oracle_refine)
        layout = SensorLayout.random_nodes(grid.values.shape, pc.sensors,
                                           _stream_seed(cfg.master_seed, _STREAM_SENSORS))
        eval_points = grid.points()
        truth = problem.qoi_metric_transform(problem.true_qoi(eval_points))
    else:
        grid = solve_diffusion_1d(problem, nx=pc.oracle_shape[0], nt=pc.oracle_shape[1],
                                  refine_x=pc.oracle_refine, refine_t=pc.oracle_refine)
        layout = SensorLayout.diffusion_default(grid)
        eval_points = grid.x[:, None]
        truth = problem.true_log_diffusivity(grid.x)
    obs = observe(grid, layout, noise)
    data = TrainingSet(obs.points, obs.values, problem.collocation_points(pc.collocation),
                       problem.boundary_operators())
    return Generated(problem, grid, obs, data, eval_points, np.asarray(truth, dtype=float))


def member_settings(cfg: ExperimentConfig, problem, dropout_rate=0.0) -> MemberSettings:
    u_arch, q_arch = architectures(problem, cfg.hidden_layers, cfg.hidden_width)
    return MemberSettings(u_arch, q_arch, cfg.weights, cfg.optim, cfg.pretrain, cfg.at, dropout_rate)


def train_members(cfg, gen: Generated, threads=None):
    trainer = EnsembleTrainer(gen.problem, gen.data, member_settings(cfg, gen.problem))
    return trainer.train_all(member_seeds(cfg.master_seed, cfg.members), threads=threads)


def train_dropout(cfg, gen: Generated):
    """One PINN whose QoI network is trained (and later sampled) with dropout."""
    trainer = EnsembleTrainer(gen.problem, gen.data, member_settings(cfg, gen.problem, cfg.dropout.rate))
    return trainer.train_member(0, _stream_seed(cfg.master_seed, _STREAM_DROPOUT))


def _field(cfg, gen, members):
    transform = gen.problem.qoi_metric_transform
    if cfg.dropout is not None:
        m = members[0]
        return mc_dropout_predict(m.q, gen.eval_points, cfg.dropout.samples, cfg.dropout.rate,
                                  seed=_stream_seed(cfg.master_seed, _STREAM_DROPOUT), transform=transform)
    ok = [m for m in members if m.ok]
    if len(ok) == 1:
        return posterior_from_matrix(gen.eval_points, np.repeat(
            np.asarray(transform(_q_values(ok[0].q, gen.eval_points)))[None], 2, axis=0))
    return posterior([m.q for m in ok], gen.eval_points, transform)


def _q_values(q, X):
    from .network import forward
    return np.asarray(forward(q, np.asarray(X, float))[:, 0])


def source_peaks(gen: Generated, mu, count=2):
    """Locations of the ``count`` largest local maxima of ``mu`` on the oracle grid."""
    g = gen.grid
    F = np.asarray(mu).reshape(len(g.x), len(g.y))
    P = np.pad(F, 1, constant_values=-np.inf)
    is_max = np.ones_like(F, dtype=bool)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx or dy:
                is_max &= F >= P[1 + dx:1 + dx + F.shape[0], 1 + dy:1 + dy + F.shape[1]]
    ii, jj = np.nonzero(is_max)
    order = np.argsort(-F[ii, jj], kind="stable")[:count]
    return [(float(g.x[ii[k]]), float(g.y[jj[k]])) for k in order]


def field_metrics(gen: Generated, field) -> dict:
    lo, hi = credibility_band(field)
    out = {
        "r2": r_squared(field.mu, gen.truth),
        "rel_l2": relative_l2(field.mu, gen.truth),
        "band_coverage": band_coverage(lo, hi, gen.truth),
        "max_sigma": float(np.sqrt(np.max(field.sigma2))),
    }
    if isinstance(gen.problem, SourceProblem):
        peaks = source_peaks(gen, field.mu, len(gen.problem.centers))
        out["peaks"] = [list(p) for p in peaks]
        out["peak_errors"] = [min(float(np.hypot(p[0] - c[0], p[1] - c[1])) for p in peaks)
                              for c in gen.problem.centers]
    return out


def evaluate(cfg, gen: Generated, members) -> tuple[dict, object]:
    field = _field(cfg, gen, members)
    metrics = field_metrics(gen, field)
    ok = [m for m in members if m.ok]
    if cfg.dropout is None and len(ok) > 2:
        sizes = {}
        for k in sorted({k for k in (2, 5, 10) if k < len(ok)} | {len(ok)}):
            sub = posterior([m.q for m in ok[:k]], gen.eval_points, gen.problem.qoi_metric_transform)
            sizes[str(k)] = {"r2": r_squared(sub.mu, gen.truth), "rel_l2": relative_l2(sub.mu, gen.truth)}
        metrics["ensemble_sizes"] = sizes
    return metrics, field


def _member_summary(m: Member):
    last = m.trace[-1] if m.trace else {}
    return {"index": m.index, "seed": m.seed, "status": m.status, "error": m.error,
            "pretrain_steps": m.pretrain_steps, "pretrain_loss": m.pretrain_loss,
            "pretrain_status": m.pretrain_status,
            "final_loss": {k: v for k, v in last.items() if k != "step"}}


def _members_from_checkpoint(entries):
    return [Member(e["index"], e["seed"], e["u"], e["q"]) for e in entries]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class _Stages:
    """Runs named stages, timing them and converting failures to :class:`StageError`."""

    def __init__(self, out):
        self.out = out
        self.timing = {}

    def __call__(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except Exception as exc:
            if self.out is not None:
                _write_json(self.out / FAILED_MARKER, {"stage": name, "error": f"{type(exc).__name__}: {exc}"})
            log.error("stage %s failed: %s", name, exc)
            raise StageError(name, exc) from exc
        finally:
            self.timing[name] = time.perf_counter() - t0


def _existing(out: Path, digest):
    mpath, cpath = out / "metrics.json", out / "checkpoint.json"
    if not (mpath.exists() and cpath.exists()) or (out / FAILED_MARKER).exists():
        return None
    metrics = json.loads(mpath.read_text())
    if metrics.get("digest") != digest:
        return None
    return metrics


def _existing_active(out: Path, digest):
    mpath, cpath = out / "metrics_active.json", out / "checkpoint_active.json"
    if not (mpath.exists() and cpath.exists()):
        return None
    metrics = json.loads(mpath.read_text())
    return metrics if metrics.get("digest") == digest else None


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out=None, active=None, reuse=False, threads=None,
                   stop_after=None) -> RunResult:
    """Run the pipeline for one configuration.

    Parameters
    ----------
    out : path, optional
        Output directory (defaults to ``cfg.output_dir``; None keeps
        everything in memory).
    active : bool, optional
        Run the active-sampling stage.  Defaults to whether the config has an
        ``active`` section.
    reuse : bool
        Skip training (and active sampling) if ``out`` already holds
        completed results with the same config digest.
    stop_after : {"generate", "train"}, optional
        Stop early after the named stage.
    """
    out = out if out is not None else cfg.output_dir
    out = Path(out) if out is not None else None
    digest = cfg.digest()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / FAILED_MARKER).unlink(missing_ok=True)
    active = (cfg.active is not None) if active is None else bool(active)
    stage = _Stages(out)

    gen = stage("generate", generate, cfg)
    if out is not None:
        cfg.save(out / "config.json")
        coords = ["x", "y"] if isinstance(gen.problem, SourceProblem) else ["x", "t"]
        write_observations(out / "observations.csv", gen.observations, coords, digest,
                           {"problem": gen.problem.to_dict()})
    if stop_after == "generate":
        return RunResult(out, {}, [], None, gen, timing=stage.timing)

    metrics = _existing(out, digest) if (reuse and out is not None) else None
    if metrics is not None:
        log.info("reusing trained run in %s", out)
        entries, _ = load_checkpoint(out / "checkpoint.json")
        members = _members_from_checkpoint(entries)
        field = stage("evaluate", evaluate, cfg, gen, members)[1]
    else:
        if cfg.dropout is not None:
            members = [stage("train", train_dropout, cfg, gen)]
            failures = [m for m in members if not m.ok]
        else:
            res = stage("train", train_members, cfg, gen, threads)
            members, failures = res.members, res.failures
        ok = [m for m in members if m.ok]
        if out is not None:
            if ok:
                save_checkpoint(out / "checkpoint.json", ok, digest)
            write_training_traces(out / "traces.csv", [("train", m.index, m.trace) for m in members], digest)
        if not ok or (cfg.dropout is None and len(ok) < min(2, cfg.members)):
            err = ContractViolation(f"{len(failures)} of {len(members)} member(s) diverged")
            if out is not None:
                _write_json(out / FAILED_MARKER, {"stage": "train", "error": str(err),
                                                  "members": [_member_summary(m) for m in failures]})
            raise StageError("train", err)
        metrics, field = stage("evaluate", evaluate, cfg, gen, members)
        metrics = {
            "name": cfg.name, "digest": digest, "kind": "dropout" if cfg.dropout is not None else "ensemble",
            "at": cfg.at.enabled, "members_requested": 1 if cfg.dropout is not None else cfg.members,
            "members_trained": len(ok), "master_seed": cfg.master_seed,
            "failures": [_member_summary(m) for m in failures],
            "members": [_member_summary(m) for m in members],
            **metrics,
        }
        if out is not None:
            write_posterior(out / "posterior.csv", field, digest, gen.truth)
            _write_json(out / "metrics.json", metrics)
        members = ok

    result = RunResult(out, metrics, members, field, gen, timing=stage.timing)
    if stop_after == "train" or not active:
        _write_timing(out, stage.timing)
        return result
    done = _existing_active(out, digest) if (reuse and out is not None) else None
    if done is not None:
        log.info("reusing active-sampling results in %s", out)
        entries, _ = load_checkpoint(out / "checkpoint_active.json")
        result.active_metrics, result.members = done, _members_from_checkpoint(entries)
    else:
        result.active_metrics, result.trace, result.members = stage(
            "active", _active_stage, cfg, gen, members, out, digest, threads)
    _write_timing(out, stage.timing)
    return result


def _write_timing(out, timing):
    if out is not None:
        _write_json(out / "timing.json", {k: round(v, 3) for k, v in timing.items()})


def _active_stage(cfg, gen, members, out, digest, threads):
    if cfg.dropout is not None:
        raise ContractViolation("active sampling needs an ensemble, not the dropout baseline")
    as_cfg = cfg.active or AsConfig()
    truth_at = {tuple(np.atleast_1d(p)): v for p, v in zip(gen.eval_points, gen.truth)}

    def truth(points):
        return np.array([truth_at[tuple(np.atleast_1d(p))] for p in points])

    new_members, trace = run_active_sampling(gen.problem, gen.data, member_settings(cfg, gen.problem),
                                             members, gen.eval_points, truth, as_cfg, threads=threads)
    field = posterior([m.q for m in new_members], gen.eval_points, gen.problem.qoi_metric_transform)
    metrics = {"digest": digest, "alpha": as_cfg.alpha, "converged": trace.converged,
               "iterations": len(trace), "final_eta": trace.final_eta,
               "final_max_sigma": trace.final_max_sigma, "initial_r2": trace.initial_r2,
               "initial_rel_l2": trace.initial_rel_l2, **field_metrics(gen, field),
               "acquired": [np.atleast_1d(r.x_s).tolist() for r in trace.records],
               "argmax_consistent": _argmax_consistent(trace)}
    if out is not None:
        write_as_trace(out / "as_trace.csv", trace, digest)
        save_checkpoint(out / "checkpoint_active.json", new_members, digest)
        write_posterior(out / "posterior_active.csv", field, digest, gen.truth)
        np.savez(out / "as_sigma2.npz", *[r.sigma2_before for r in trace.records])
        _write_json(out / "metrics_active.json", metrics)
    return metrics, trace, new_members


def _argmax_consistent(trace):
    """Each acquisition is the largest not-yet-acquired variance of the preceding field."""
    taken = []
    for r in trace.records:
        s2 = np.array(r.sigma2_before, dtype=float)
        if taken:
            s2[taken] = -np.inf
        if s2[r.index] != np.max(s2):
            return False
        taken.append(r.index)
    return True


def evaluate_run(out, cfg: ExperimentConfig | None = None):
    """Recompute the posterior and metrics from a run directory's checkpoint."""
    out = Path(out)
    cfg = cfg or ExperimentConfig.load(out / "config.json")
    entries, doc = load_checkpoint(out / "checkpoint.json")
    if doc.get("digest") != cfg.digest():
        raise CheckpointError(f"checkpoint digest {doc.get('digest')} does not match config {cfg.digest()}")
    gen = generate(cfg)
    members = _members_from_checkpoint(entries)
    metrics, field = evaluate(cfg, gen, members)
    return metrics, field, gen


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("run", "problem", "method", "at", "members", "seed", "r2", "rel_l2", "band_coverage")


def report_rows(run_dirs):
    """One row per method variant found in the run directories.

    Ensemble runs contribute a row for every nested ensemble size they
    recorded, so an M=10 run also yields its first-five-member ensemble.
    """
    rows = []
    for d in run_dirs:
        d = Path(d)
        mpath = d / "metrics.json"
        if not mpath.exists():
            log.warning("skipping %s: no metrics.json", d)
            continue
        m = json.loads(mpath.read_text())
        cfg = ExperimentConfig.load(d / "config.json")
        prob = cfg.problem.kind if cfg.problem.kind == "source2d" else f"{cfg.problem.kind}-{cfg.problem.profile}"
        prob += f" noise={cfg.problem.noise_std:g}"
        base = {"run": d.name, "problem": prob, "at": m["at"], "seed": m["master_seed"]}
        if m["kind"] == "dropout":
            rows.append({**base, "method": "MC-dropout", "members": 1, "r2": m["r2"], "rel_l2": m["rel_l2"],
                         "band_coverage": m["band_coverage"]})
            continue
        sizes = m.get("ensemble_sizes", {str(m["members_trained"]): {"r2": m["r2"], "rel_l2": m["rel_l2"]}})
        for k, v in sorted(sizes.items(), key=lambda kv: int(kv[0])):
            if int(k) < 5 and int(k) != m["members_trained"]:
                continue
            cov = m["band_coverage"] if int(k) == m["members_trained"] else None
            rows.append({**base, "method": "E-PINN" if m["at"] else "ensemble PINN", "members": int(k),
                         "r2": v["r2"], "rel_l2": v["rel_l2"], "band_coverage": cov})
        act = d / "metrics_active.json"
        if act.exists():
            a = json.loads(act.read_text())
            rows.append({**base, "method": f"E-PINN + AS ({a['iterations']} pts)", "members": m["members_trained"],
                         "r2": a["r2"], "rel_l2": a["rel_l2"], "band_coverage": a["band_coverage"]})
    return rows


def format_report(rows, sep="|"):
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    lines = [sep.join(REPORT_COLUMNS)]
    lines += [sep.join(cell(r[c]) for c in REPORT_COLUMNS) for r in rows]
    return "\n".join(lines)


def write_report(run_dirs, out, figures=True):
    """Write ``report.csv`` and ``report.txt`` and, optionally, figures per run."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = report_rows(run_dirs)
    (out / "report.csv").write_text(format_report(rows, sep=",") + "\n")
    text = format_report(rows)
    (out / "report.txt").write_text(text + "\n")
    paths = []
    if figures:
        from .plotting import render_run
        for d in run_dirs:
            if (Path(d) / "metrics.json").exists():
                paths += render_run(d, out / "figures")
    return rows, text, paths


def clean_run_dir(out):
    out = Path(out)
    if out.exists():
        shutil.rmtree(out)
