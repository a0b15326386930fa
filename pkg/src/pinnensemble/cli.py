"""Command-line entry point: ``pinnensemble {generate,train,sample,evaluate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ExperimentConfig, preset
from .errors import CheckpointError, ContractViolation, StageError

log = logging.getLogger("pinnensemble")


def _add_run_args(p, train=True):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="JSON experiment config")
    src.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", type=Path, help="output directory")
    if train:
        p.add_argument("--no-at", action="store_true", help="disable adversarial training")
        p.add_argument("--members", type=int, help="ensemble size override")
        p.add_argument("--dropout-baseline", action="store_true",
                       help="train one MC-dropout PINN instead of an ensemble")
        p.add_argument("--reuse", action="store_true",
                       help="reuse a completed training run in --out with the same config digest")


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset is not None:
        cfg = preset(args.preset)
    else:
        raise ContractViolation("one of --config or --preset is required")
    cfg = cfg.with_overrides(seed=args.seed, members=getattr(args, "members", None),
                             at=False if getattr(args, "no_at", False) else None,
                             dropout=getattr(args, "dropout_baseline", False), out=args.out)
    if cfg.output_dir is None:
        cfg = cfg.with_overrides(out=Path("runs") / f"{cfg.name}-seed{cfg.master_seed}")
    return cfg


def _print_metrics(metrics, keys=("r2", "rel_l2", "band_coverage", "max_sigma")):
    for k in keys:
        if k in metrics:
            print(f"{k}|{metrics[k]:.6g}")


def cmd_generate(args):
    from .harness import run_experiment
    cfg = resolve_config(args)
    res = run_experiment(cfg, stop_after="generate")
    print(f"observations|{len(res.generated.observations)}")
    print(f"out|{res.out}")


def cmd_train(args):
    from .harness import run_experiment
    cfg = resolve_config(args)
    res = run_experiment(cfg, active=False, reuse=args.reuse)
    _print_metrics(res.metrics)
    print(f"out|{res.out}")


def cmd_sample(args):
    from .harness import run_experiment
    cfg = resolve_config(args)
    res = run_experiment(cfg, active=True, reuse=args.reuse)
    a = res.active_metrics
    print(f"converged|{a['converged']}")
    print(f"iterations|{a['iterations']}")
    _print_metrics(a)
    print(f"out|{res.out}")


def cmd_evaluate(args):
    from .harness import evaluate_run
    if args.out is None:
        raise ContractViolation("--out must point at a run directory")
    cfg = ExperimentConfig.load(args.out / "config.json")
    metrics, _, _ = evaluate_run(args.out, cfg)
    _print_metrics(metrics)
    stored = json.loads((args.out / "metrics.json").read_text())
    same = all(stored.get(k) == metrics.get(k) for k in ("r2", "rel_l2"))
    print(f"matches_stored|{same}")


def cmd_report(args):
    from .harness import write_report
    runs = [Path(p) for p in args.runs]
    runs = [d for p in runs for d in (sorted(p.iterdir()) if not (p / "metrics.json").exists() and p.is_dir()
                                      else [p])]
    rows, text, figs = write_report(runs, args.out, figures=not args.no_figures)
    print(text)
    for f in figs:
        print(f"figure|{f}")


def build_parser():
    p = argparse.ArgumentParser(prog="pinnensemble", description="Ensemble PINNs for field inversion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build the oracle field and noisy observations")
    _add_run_args(g, train=False)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an ensemble (or the dropout baseline) and evaluate it")
    _add_run_args(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="train (or reuse) an ensemble, then run active sampling")
    _add_run_args(s)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="recompute metrics from a run directory's checkpoint")
    e.add_argument("--out", type=Path, required=True, help="run directory")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="aggregate run directories into a comparison table with figures")
    r.add_argument("runs", nargs="+", help="run directories (or parents of run directories)")
    r.add_argument("--out", type=Path, default=Path("report"), help="report directory")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error|{exc}", file=sys.stderr)
        return 1
    except (ContractViolation, CheckpointError, FileNotFoundError) as exc:
        print(f"error|{exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
