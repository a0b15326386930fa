"""Checkpoints and plot-ready CSV exports.

Every file carries the config digest: JSON documents in a ``digest`` field,
CSV files in a leading ``# digest=...`` comment line.  Floats are written
with 17 significant digits so values survive a round trip unchanged.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .network import MlpArchitecture, NetworkParams

CHECKPOINT_FORMAT = "pinnensemble-checkpoint"
CHECKPOINT_VERSION = 1


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def params_to_dict(p: NetworkParams):
    return {
        "arch": p.arch.to_dict(),
        "seed": p.seed,
        "weights": [np.asarray(w).tolist() for w in p.weights],
        "biases": [np.asarray(b).tolist() for b in p.biases],
    }


def params_from_dict(d, where="params") -> NetworkParams:
    for key in ("arch", "weights", "biases"):
        if key not in d:
            raise CheckpointError(f"{where}: missing field {key!r}")
    try:
        arch = MlpArchitecture.from_dict(d["arch"])
    except Exception as exc:
        raise CheckpointError(f"{where}.arch: {exc}") from exc
    try:
        ws = tuple(np.asarray(w, dtype=float) for w in d["weights"])
        bs = tuple(np.asarray(b, dtype=float) for b in d["biases"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{where}.weights/biases: not numeric ({exc})") from exc
    p = NetworkParams(arch, ws, bs, d.get("seed"))
    try:
        p.check_shapes()
    except Exception as exc:
        raise CheckpointError(f"{where}.weights: {exc}") from exc
    return p


def save_checkpoint(path, members, digest=None, extra=None):
    """Write ``members`` (objects with index, seed, u, q) to one JSON file."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "digest": digest,
        "members": [
            {"index": m.index, "seed": m.seed,
             "u": params_to_dict(m.u) if m.u is not None else None,
             "q": params_to_dict(m.q)}
            for m in members
        ],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(members, doc)``.

    Each member is a dict with ``index``, ``seed``, ``u`` and ``q``
    (:class:`NetworkParams`, ``u`` may be None).
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt payload ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: field 'format' is not {CHECKPOINT_FORMAT!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: field 'version' is {doc.get('version')!r}, "
                              f"expected {CHECKPOINT_VERSION}")
    if not isinstance(doc.get("members"), list):
        raise CheckpointError(f"{path}: field 'members' missing or not a list")
    out = []
    for k, m in enumerate(doc["members"]):
        where = f"members[{k}]"
        if "q" not in m or m["q"] is None:
            raise CheckpointError(f"{where}: missing field 'q'")
        out.append({
            "index": m.get("index", k), "seed": m.get("seed"),
            "u": params_from_dict(m["u"], where + ".u") if m.get("u") is not None else None,
            "q": params_from_dict(m["q"], where + ".q"),
        })
    return out, doc


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(path, header, rows, digest=None):
    with open(path, "w", newline="") as fh:
        if digest is not None:
            fh.write(f"# digest={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if v is not None else "" for v in r])


def read_csv(path):
    """Returns ``(header, float array, digest)``; blank cells become NaN."""
    digest = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("# digest="):
        digest = lines[0].split("=", 1)[1]
        lines = lines[1:]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    data = np.array([[float(c) if c != "" else math.nan for c in r] for r in body], dtype=float)
    return header, data.reshape(len(body), len(header)), digest


def coordinate_names(dim):
    return ["x", "y", "z"][:dim] if dim <= 3 else [f"x{i}" for i in range(dim)]


def write_observations(path, obs, coord_names, digest=None, meta=None):
    rows = [(*p, d, t) for p, d, t in zip(obs.points, obs.values, obs.truth)]
    write_csv(path, [*coord_names, "d", "u_true"], rows, digest)
    side = {"digest": digest, "count": len(obs), "noise_std": obs.noise.std, "noise_seed": obs.noise.seed,
            "columns": [*coord_names, "d", "u_true"]}
    side.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def write_posterior(path, field, digest=None, truth=None):
    P = np.asarray(field.points).reshape(len(field), -1)
    names = coordinate_names(P.shape[1])
    header = [*names, "mu", "sigma2"] + (["truth"] if truth is not None else [])
    header += [f"member_{k}" for k in range(field.members.shape[0])]
    rows = []
    for i in range(len(field)):
        r = [*P[i], field.mu[i], field.sigma2[i]]
        if truth is not None:
            r.append(truth[i])
        rows.append(r + list(field.members[:, i]))
    write_csv(path, header, rows, digest)


def write_as_trace(path, trace, digest=None):
    rows = trace.rows()
    if not rows:
        write_csv(path, ["iteration", "x_s0", "m_s", "max_sigma_before", "max_sigma_after",
                         "eta", "r2", "rel_l2"], [], digest)
        return
    header = list(rows[0])
    write_csv(path, header, [[r[h] for h in header] for r in rows], digest)


TRACE_TERMS = ("data", "at", "pde", "bc", "qoi", "total")


def write_training_traces(path, traces, digest=None):
    """``traces``: iterable of ``(label, member_index, records)``."""
    header = ["phase", "member", "step", *TRACE_TERMS]
    rows = []
    phases = {}
    for label, idx, recs in traces:
        code = phases.setdefault(label, len(phases))
        for r in recs:
            rows.append([code, idx, r["step"], *[r.get(t) for t in TRACE_TERMS]])
    write_csv(path, header, rows, digest)
    Path(str(path) + ".json").write_text(json.dumps({"digest": digest, "phases": phases},
                                                    indent=2, sort_keys=True) + "\n")
