"""Grid of fault-free runs: per-block cost as n, delta, beta and sigma vary.

With delta > 1 the adaptive WRB timer can undercut a slow link, so some
rounds pull the block or go nil; those show up in the last two columns.

Usage: python3 scripts/cost_grid.py [--rounds 200] [--out grid.csv]
"""
from __future__ import annotations

import argparse
import csv
import itertools
import sys

from toysim.harness.runner import run_scenario
from toysim.harness.scenario import Scenario

COLUMNS = ("n", "f", "delta", "beta", "sigma", "header_mode", "steps_amortized", "messages_per_block",
           "signs_per_block", "verifies_per_block", "pulls", "nil_rounds")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", help="CSV file (stdout when omitted)")
    args = ap.parse_args(argv)

    rows = []
    for n, delta, beta, sigma in itertools.product((4, 7, 10), (1, 5), (1, 64), (64, 512)):
        header_mode = beta * sigma >= 4096
        sc = Scenario(n=n, f=(n - 1) // 3, seed=args.seed, rounds=args.rounds, delta=delta, beta=beta, sigma=sigma,
                      header_mode=header_mode, tx_rate=float(beta))
        res = run_scenario(sc)
        if res.violations or not res.finished:
            print(f"n={n} delta={delta} beta={beta} sigma={sigma}: run failed", file=sys.stderr)
            return 1
        rep = res.report
        rows.append({"n": n, "f": sc.f, "delta": delta, "beta": beta, "sigma": sigma, "header_mode": header_mode,
                     **{k: rep[k] for k in COLUMNS[6:]}})

    fp = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(fp, fieldnames=COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        fp.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
