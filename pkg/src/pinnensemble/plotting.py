"""Figures for the report command (PNG files, rendered off-screen)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import TRACE_TERMS, read_csv  # noqa: E402


def _col(header, data, name):
    return data[:, header.index(name)]


def plot_posterior_1d(ax, header, data, title=""):
    x = _col(header, data, "x")
    mu, s = _col(header, data, "mu"), np.sqrt(_col(header, data, "sigma2"))
    ax.fill_between(x, mu - 2 * s, mu + 2 * s, color="tab:blue", alpha=0.25, label="mu +/- 2 sigma")
    ax.plot(x, mu, color="tab:blue", label="ensemble mean")
    if "truth" in header:
        ax.plot(x, _col(header, data, "truth"), "k--", label="truth")
    ax.set_xlabel("x")
    ax.set_ylabel("log(v - 0.1)")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)


def plot_posterior_2d(fig, header, data, title=""):
    x, y = _col(header, data, "x"), _col(header, data, "y")
    nx, ny = len(np.unique(x)), len(np.unique(y))
    panels = [("truth", "truth"), ("mu", "mean"), ("sigma2", "std")]
    panels = [p for p in panels if p[0] in header]
    axes = fig.subplots(1, len(panels))
    for ax, (key, label) in zip(np.atleast_1d(axes), panels):
        F = _col(header, data, key).reshape(nx, ny)
        if key == "sigma2":
            F = np.sqrt(F)
        im = ax.imshow(F.T, origin="lower", extent=(x.min(), x.max(), y.min(), y.max()), cmap="viridis")
        ax.set_title(label)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.suptitle(title)


def plot_traces(ax, header, data, phases=None):
    members = np.unique(_col(header, data, "member")).astype(int)
    for term, color in zip(TRACE_TERMS, plt.rcParams["axes.prop_cycle"].by_key()["color"]):
        col = _col(header, data, term)
        if np.all(np.isnan(col)):
            continue
        for k, m in enumerate(members):
            sel = (_col(header, data, "member") == m) & (_col(header, data, "phase") == 0)
            ax.semilogy(_col(header, data, "step")[sel], col[sel], color=color, alpha=0.6,
                        label=term if k == 0 else None)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="best", fontsize=8)


def plot_as_trace(ax, header, data):
    it = _col(header, data, "iteration")
    ax.plot(it, _col(header, data, "max_sigma_before"), "o-", label="max sigma (before)")
    ax.plot(it, _col(header, data, "max_sigma_after"), "s-", label="max sigma (after)")
    ax.plot(it, _col(header, data, "eta"), "k--", label="eta")
    ax.set_xlabel("iteration")
    ax.legend(loc="best", fontsize=8)


def render_run(run_dir, fig_dir):
    """Render every figure the run's artifacts support; returns the written paths."""
    run_dir, fig_dir = Path(run_dir), Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    name = run_dir.name
    written = []

    def save(fig, suffix):
        p = fig_dir / f"{name}_{suffix}.png"
        fig.savefig(p, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(p)

    for stem, label in (("posterior", "trained"), ("posterior_active", "after active sampling")):
        path = run_dir / f"{stem}.csv"
        if not path.exists():
            continue
        header, data, _ = read_csv(path)
        if "y" in header:
            fig = plt.figure(figsize=(12, 3.6))
            plot_posterior_2d(fig, header, data, f"{name}: {label}")
        else:
            fig, ax = plt.subplots(figsize=(6, 4))
            plot_posterior_1d(ax, header, data, f"{name}: {label}")
            if stem == "posterior_active" and (run_dir / "metrics_active.json").exists():
                acq = json.loads((run_dir / "metrics_active.json").read_text())["acquired"]
                for k, (xs,) in enumerate(acq):
                    ax.axvline(xs, color="tab:red", lw=0.8, alpha=0.7, label="acquired" if k == 0 else None)
                ax.legend(loc="best", fontsize=8)
        save(fig, stem)

    if (run_dir / "traces.csv").exists():
        header, data, _ = read_csv(run_dir / "traces.csv")
        if len(data):
            fig, ax = plt.subplots(figsize=(6, 4))
            plot_traces(ax, header, data)
            ax.set_title(f"{name}: loss terms")
            save(fig, "traces")

    if (run_dir / "as_trace.csv").exists():
        header, data, _ = read_csv(run_dir / "as_trace.csv")
        if len(data):
            fig, ax = plt.subplots(figsize=(6, 4))
            plot_as_trace(ax, header, data)
            ax.set_title(f"{name}: active sampling")
            save(fig, "active")
    return written
