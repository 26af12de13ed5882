#!/usr/bin/env python3
"""Quick look at one offline cell: every method, a few replications, per-replication values."""
import argparse

from vlearning.evalkit import OFFLINE_METHODS, ExperimentConfig, run_experiment
from vlearning.vlearn import SearchConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--env", default="toy")
    ap.add_argument("--n", type=int, default=25)
    ap.add_argument("--T", type=int, default=24)
    ap.add_argument("--reps", type=int, default=4)
    ap.add_argument("--methods", default=",".join(OFFLINE_METHODS))
    ap.add_argument("--anneal-evals", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ExperimentConfig(args.env, args.n, args.T, replications=args.reps, methods=tuple(args.methods.split(",")),
                           seed=args.seed, search=SearchConfig(anneal_evals=args.anneal_evals))
    res = run_experiment(cfg)
    for row in res.rows:
        vals = " ".join(f"{v:+.3f}" for v in res.values[row.method])
        print(f"{row.method:>14}  mean {row.mean_value:+.4f}  sd {row.mc_sd:.4f}  [{vals}]")


if __name__ == "__main__":
    main()
