"""Command line entry point: ``toysim run --scenario s.cfg [options]``.

Exit codes: 0 success, 1 oracle violation (or a run that did not reach its
round target), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

from .runner import run_scenario
from .scenario import Scenario, load_scenario

SWEEPABLE = ("n", "f", "beta", "sigma", "seed", "rounds", "delta", "tx_rate", "perm_interval")


class UsageError(Exception):
    pass


def parse_range(text: str) -> list:
    """``4,7,10`` or ``lo..hi`` or ``lo..hi..step`` (inclusive)."""
    def num(s: str):
        try:
            return int(s)
        except ValueError:
            return float(s)

    if ".." in text:
        parts = text.split("..")
        if len(parts) not in (2, 3):
            raise UsageError(f"bad range {text!r}")
        lo, hi = int(parts[0]), int(parts[1])
        step = int(parts[2]) if len(parts) == 3 else 1
        if step <= 0 or hi < lo:
            raise UsageError(f"bad range {text!r}")
        return list(range(lo, hi + 1, step))
    try:
        return [num(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad value list {text!r}") from None


def parse_sweep(specs: list[str]) -> list[dict]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"sweep needs param=range, got {spec!r}")
        name, rng = spec.split("=", 1)
        name = name.strip()
        if name not in SWEEPABLE:
            raise UsageError(f"cannot sweep {name!r}; choose from {', '.join(SWEEPABLE)}")
        values = parse_range(rng)
        if not values:
            raise UsageError(f"empty sweep range for {name}")
        axes.append([(name, v) for v in values])
    return [dict(combo) for combo in itertools.product(*axes)] if axes else [{}]


def expand(base: Scenario, point: dict) -> Scenario:
    changes = dict(point)
    if "n" in changes and "f" not in changes:
        changes["f"] = (changes["n"] - 1) // 3
    return base.with_(**changes)


def _suffixed(path: Path, point: dict) -> Path:
    if not point:
        return path
    tag = "-".join(f"{k}{v}" for k, v in point.items())
    return path.with_name(f"{path.stem}-{tag}{path.suffix}")


def _summary(point: dict, res) -> str:
    rep = res.report
    head = " ".join(f"{k}={v}" for k, v in point.items()) or res.scenario.name or "run"
    return (f"{head}: blocks={rep['blocks_tentative']} definite={rep['blocks_definite']} "
            f"steps_amortized={rep['steps_amortized']} signs/block={rep['signs_per_block']:.3f} "
            f"recoveries={rep['recoveries']} nil_rounds={rep['nil_rounds']} violations={len(res.violations)}")


def cmd_run(args: argparse.Namespace) -> int:
    if args.scenario is not None:
        path = Path(args.scenario)
        if not path.is_file():
            raise UsageError(f"cannot read scenario file {path}")
        base = load_scenario(path, seed=args.seed, rounds=args.rounds)
    else:
        overrides = {k: v for k, v in (("seed", args.seed), ("rounds", args.rounds)) if v is not None}
        base = Scenario(**overrides)
    points = parse_sweep(args.sweep or [])
    scenarios = [(p, expand(base, p)) for p in points]

    status = 0
    reports = []
    for point, sc in scenarios:
        if sc.beyond_f and args.check:
            print(f"warning: {sc.name or 'scenario'} exceeds f faulty nodes; oracle disabled", file=sys.stderr)
        res = run_scenario(sc, check=args.check)
        if args.out:
            with open(_suffixed(Path(args.out), point), "w") as fp:
                res.trace.write(fp)
        report = {"sweep": point, "finished": res.finished, "violations": [str(v) for v in res.violations],
                  **res.report}
        reports.append(report)
        print(_summary(point, res))
        for v in res.violations[:20]:
            print(f"  {v}")
        if res.violations or (args.check and not res.finished and not sc.beyond_f):
            status = 1
    if args.report:
        with open(args.report, "w") as fp:
            for report in reports:
                fp.write(json.dumps(report, sort_keys=True) + "\n")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toysim", description="Deterministic TOY protocol simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario (or a sweep of scenarios)")
    run.add_argument("--scenario", help="scenario file (key=value lines)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--rounds", type=int, help="override the round target")
    run.add_argument("--out", help="write the trace here (sweeps add a -<param><value> suffix)")
    run.add_argument("--report", help="write reports here, one JSON object per line")
    run.add_argument("--check", action=argparse.BooleanOptionalAction, default=False,
                     help="run the trace oracle and fail on violations")
    run.add_argument("--sweep", action="append", metavar="PARAM=RANGE",
                     help="sweep a parameter, e.g. n=4,7,10 or beta=1..64..8 (repeatable)")
    run.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError) as exc:
        print(f"toysim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
