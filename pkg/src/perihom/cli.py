"""Command line entry point: ``perihom <subcommand> [--config ...] [--out ...]``."""
from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import experiments as ex
from .errors import PerihomError

SUBCOMMANDS = ("validate", "cell", "effective", "solve", "converge", "consistency")


def parse_eps(text: str) -> tuple:
    """``"1/2,1/4,0.125"`` -> ``(0.5, 0.25, 0.125)``."""
    try:
        return tuple(float(Fraction(t.strip())) for t in text.split(",") if t.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad eps list {text!r}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perihom",
                                     description="Periodic homogenization of nonlocal elasticity.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path,
                        help="JSON experiment config or bare model config "
                             "(default: homogeneous indicator kernel in 2D)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--seed", type=int, help="seed for sampled checks")
    common.add_argument("--grid", type=int, help="nodes per axis of the unit cell")
    common.add_argument("--eps", type=parse_eps, help="comma separated eps list, e.g. 1/2,1/4,1/8")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    if args.config is not None:
        raw = json.loads(args.config.read_text())
        if "kernel" in raw:
            raw = {"model": raw}
    else:
        raw = {"model": ex.model_config()}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.grid is not None:
        raw["cell_grid"] = args.grid
    if args.eps is not None:
        raw["eps"] = list(args.eps)
    return ex.ExperimentConfig.from_dict(raw)


def run(args) -> int:
    cfg = resolve_config(args)
    out = args.out
    cache = out / "cache"
    cmd = args.command
    if cmd == "validate":
        report = ex.run_validate(cfg)
    elif cmd == "cell":
        report = ex.run_cell(cfg, cache)
    elif cmd == "effective":
        report = ex.run_effective(cfg, cache)
    elif cmd == "solve":
        report = ex.run_solve(cfg, cache)
    elif cmd == "converge":
        table = ex.run_convergence(cfg, cache)
        report = table.to_dict()
        report["passed"] = ex.convergence_passed(cfg, table)
        ex.write_text(out / "converge.csv", table.to_csv())
    else:
        report = ex.run_consistency(cfg, cache)
        ex.write_text(out / "consistency.csv", ex.consistency_csv(report))
    path = ex.write_report(out / f"{cmd}.json", report)
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{cmd}: {status} ({path})")
    return 0 if report["passed"] else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (PerihomError, ValueError, OSError) as exc:
        print(f"perihom {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
