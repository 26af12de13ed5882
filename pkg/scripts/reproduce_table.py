#!/usr/bin/env python3
"""Monte Carlo grid for one of the five result tables.

    python3 scripts/reproduce_table.py --table 1 --reps 50 --cells 25:24,100:48
"""
import argparse
import logging

from vlearning.evalkit import format_grid, reproduce_table, write_replications, write_rows
from vlearning.vlearn import SearchConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--table", type=int, required=True, choices=range(1, 6))
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--cells", default=None, help="n:T,n:T (default: full 3x3 grid)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--anneal-evals", type=int, default=1000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="table.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cells = None
    if args.cells:
        cells = [tuple(int(v) for v in c.split(":")) for c in args.cells.split(",")]
    results = reproduce_table(args.table, args.reps, args.seed, cells, args.workers,
                              SearchConfig(anneal_evals=args.anneal_evals))
    write_rows([r for res in results for r in res.rows], args.out)
    write_replications(results, args.out.replace(".csv", "") + "_replications.csv")
    print(format_grid(results))


if __name__ == "__main__":
    main()
