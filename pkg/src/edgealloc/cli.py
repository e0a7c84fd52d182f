"""Command line: train, eval, compare, gradcheck.

Exit codes: 0 success, 2 validation error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness, plotting
from .simenv import ConfigError
from .tensornet import ContractError


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError([f"--seed must be a u64 (got {args.seed})"])
        cfg.seed = args.seed
        cfg.env.seed = args.seed
    if getattr(args, "method", None):
        if args.method not in harness.METHODS:
            raise ConfigError([f"--method must be one of {', '.join(harness.METHODS)}"])
        cfg.method = args.method
    if getattr(args, "episodes", None) is not None:
        cfg.episodes = args.episodes
    if getattr(args, "eval_episodes", None) is not None:
        cfg.eval_episodes = args.eval_episodes
    errs = cfg.violations()
    if errs:
        raise ConfigError(errs)
    return cfg


def _out(args, cfg) -> Path:
    return Path(args.out or cfg.output_dir)


def _print_report(report) -> None:
    print("metric,mean,stddev")
    for m in report.per_episode:
        print(f"{m},{report.mean(m):.9g},{report.std(m):.9g}")


def cmd_train(args) -> int:
    cfg = _config(args)
    progress = None
    if not args.quiet:
        progress = lambda r: print(f"episode {r.episode} reward {r.cumulative_reward:.6g}", file=sys.stderr)
    out = harness.cmd_train(cfg, _out(args, cfg), progress)
    if out.log:
        plotting.learning_curve(out.log, out.run_dir / "learning_curve.png", harness.run_id(cfg))
    print(f"run_dir,{out.run_dir}")
    print(f"episodes,{len(out.log)}")
    print(f"checkpoint,{out.checkpoint or ''}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    report = harness.cmd_eval(cfg, args.checkpoint, out)
    plotting.eval_series(report, out / "eval_series.png")
    _print_report(report)
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    spec = harness.SweepSpec(args.sweep)
    methods = args.methods.split(",") if args.methods else [cfg.method]
    out = _out(args, cfg)
    progress = None
    if not args.quiet:
        progress = lambda m, v, r: print(f"{m} {spec.parameter}={v:g} done", file=sys.stderr)
    result = harness.cmd_compare(cfg, spec, methods, out, progress)
    plotting.sweep_figures(result.rows, spec.parameter, harness.SWEEP_UNITS[spec.parameter], out)
    print(",".join(harness.COMPARE_FIELDS))
    for r in result.rows:
        print(f"{r.method},{r.parameter},{r.value:g},{r.metric},{r.mean:.9g},{r.stddev:.9g}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for m, v, err in result.failures:
        print(f"failed cell {m} {spec.parameter}={v:g}: {err}", file=sys.stderr)
    return 1 if result.failures and not result.rows else 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    reports = run_suite(draws=args.draws, seed=args.seed or 0)
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgealloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat TOML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("train", help="train a method and write a run directory")
    common(sp)
    sp.add_argument("--method")
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint or rule-based method")
    common(sp)
    sp.add_argument("--method")
    sp.add_argument("--checkpoint")
    sp.add_argument("--eval-episodes", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="sweep one parameter across methods")
    common(sp)
    sp.add_argument("--sweep", required=True, choices=sorted(harness.SWEEPS))
    sp.add_argument("--methods", help="comma-separated method names")
    sp.add_argument("--method", help="single method (ignored when --methods is given)")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--eval-episodes", type=int)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--draws", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        for e in getattr(exc, "errors", None) or [str(exc)]:
            print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level exit code mapping
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
