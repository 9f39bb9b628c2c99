"""Command-line interface: ``distill run | gradcheck | synth``.

Exit codes: 0 success, 1 gradcheck tolerance failure, 2 configuration error,
3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .config import ExperimentConfig, config_from_dict, load_config
from .errors import ConfigError, ContractError, GraphParseError, GraphValidationError, \
    TrainingDivergenceError
from .graphs import save_graph, synth_graph
from .train import emit_report, grad_check, run_experiment, write_history_csv

GRADCHECK_TOLERANCE = 1e-4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distill",
                                     description="GNN-to-Transformer distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train teachers/baselines/students and emit a report")
    run.add_argument("--config", help="JSON experiment config")
    run.add_argument("--teacher", help="comma-separated kinds: gcn,sage,gat")
    run.add_argument("--lambda", dest="lam", type=float, help="supervision balance in [0,1]")
    run.add_argument("--tau", type=float, help="softening temperature")
    run.add_argument("--scales", type=int, help="number of multi-scale layers")
    run.add_argument("--input-mode", choices=["teacher-latent", "raw-features"])
    run.add_argument("--epochs", type=int, help="cap on teacher/mlp/student epochs")
    run.add_argument("--seed", type=int)
    run.add_argument("--runs", type=int)
    run.add_argument("--data", help="GraphJSON path (or relative to $DISTILL_DATA_DIR)")
    run.add_argument("--out", help="report path (default report.csv)")
    run.add_argument("--format", choices=["csv", "json"])
    run.add_argument("--history-dir", help="directory for per-epoch loss CSVs")

    gc = sub.add_parser("gradcheck", help="finite-difference check of student gradients")
    gc.add_argument("--n", type=int, default=5, help="synthetic instance size (<= 8)")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--lambda", dest="lam", type=float,
                    help="check one lambda instead of the default sweep")
    gc.add_argument("--tau", type=float)

    synth = sub.add_parser("synth", help="generate a synthetic GraphJSON dataset")
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument("--n", type=int, required=True)
    synth.add_argument("--classes", type=int, required=True)
    synth.add_argument("--p-in", type=float, required=True)
    synth.add_argument("--p-out", type=float, required=True)
    synth.add_argument("--feature-dim", type=int, default=16)
    synth.add_argument("--out", required=True)
    return parser


def _run_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.teacher:
        updates["teachers"] = tuple(k.strip() for k in args.teacher.split(",") if k.strip())
    for name in ("seed", "runs", "data", "out"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = value
    if args.format:
        updates["fmt"] = args.format
    if args.history_dir:
        updates["history_dir"] = args.history_dir
    if args.input_mode:
        updates["student"] = dataclasses.replace(cfg.student, input_mode=args.input_mode)
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        updates["teacher"] = dataclasses.replace(cfg.teacher, epochs=args.epochs)
        updates["mlp"] = dataclasses.replace(cfg.mlp, epochs=args.epochs)
        student = updates.get("student", cfg.student)
        updates["student"] = dataclasses.replace(student, epochs=args.epochs)
    distill_updates = {}
    if args.lam is not None:
        distill_updates["lam"] = args.lam
    if args.tau is not None:
        distill_updates["tau"] = args.tau
    if args.scales is not None:
        distill_updates["k_scales"] = args.scales
    if distill_updates:
        updates["distill"] = dataclasses.replace(cfg.distill, **distill_updates)
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg.validate()


def _cmd_run(args) -> int:
    cfg = _run_config(args)
    result = run_experiment(cfg)
    out = cfg.out or "report.csv"
    if result.rows:
        emit_report(result.rows, cfg.fmt, out)
        for row in result.rows:
            print(f"{row.teacher:>5} {row.method:<20} {row.mean_acc:.4f} "
                  f"+/- {row.std_acc:.4f} (n={row.runs})")
        print(f"report written to {out}")
    meta = {
        "config": cfg.semantic_dict(),
        "fingerprint": cfg.fingerprint(),
        "out": out,
        "format": cfg.fmt,
        "input_mode": cfg.student.input_mode,
        "row_normalized_features": cfg.row_normalize,
        "lambda_schedule": cfg.distill.schedule,
        "failures": result.failures,
    }
    with open(out + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.history_dir:
        os.makedirs(cfg.history_dir, exist_ok=True)
        for (kind, seed), records in result.histories.items():
            write_history_csv(records, os.path.join(cfg.history_dir,
                                                    f"{kind}_seed{seed}.history.csv"))
    if result.failures:
        for f in result.failures:
            print(f"FAILED: {f}", file=sys.stderr)
        return 4
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = ExperimentConfig(seed=args.seed)
    if args.tau is not None:
        cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, tau=args.tau))
    cfg = cfg.validate()
    lams = [args.lam] if args.lam is not None else [cfg.distill.lam, 0.0, 0.5, 1.0]
    worst = 0.0
    for lam in lams:
        err = grad_check(cfg, instance_size=args.n, lam=lam)
        print(f"lambda={lam:.2f} max_rel_err={err:.3e}")
        worst = max(worst, err)
    status = "OK" if worst < GRADCHECK_TOLERANCE else "FAIL"
    print(f"max relative error: {worst:.3e} [{status}]")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def _cmd_synth(args) -> int:
    g = synth_graph(seed=args.seed, n=args.n, classes=args.classes,
                    p_in=args.p_in, p_out=args.p_out, feature_dim=args.feature_dim)
    save_graph(g, args.out)
    print(f"wrote {args.out}: n={g.num_nodes} classes={g.num_classes} "
          f"directed_edges={g.edges.shape[0]}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "synth":
            return _cmd_synth(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (GraphParseError, GraphValidationError, FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except TrainingDivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
