#!/usr/bin/env python3
"""Coverage of V_hat +- 1.96 sigma_hat / sqrt(n) for a fixed softmax policy on the toy model.

The truth is the discounted value from behaviour-stationary states, estimated
by a long rollout.  ``--cluster`` switches to the patient-clustered variance.
"""
import argparse

import numpy as np

from vlearning.basis import FeatureMap, basis_kind
from vlearning.policy import SoftmaxPolicy
from vlearning.simenv import ToyEnv, burn_in, generate_offline, simulate
from vlearning.vlearn import fit_value_model, variance_estimate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--basis", default="gaussian")
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--T", type=int, default=24)
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--gamma", type=float, default=0.9)
    ap.add_argument("--truth-patients", type=int, default=10_000)
    ap.add_argument("--cluster", action="store_true")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    env = ToyEnv()
    prop = env.behavior_propensity()
    fm = FeatureMap(basis_kind(args.basis), np.array([-3.0, -3.0]), np.array([3.0, 3.0]))
    pol = SoftmaxPolicy([[0.3, -1.0, 0.5]], 2)
    g = args.gamma

    rng = np.random.default_rng(args.seed + 70)
    _, _, u, _, _ = simulate(env, burn_in(env, args.truth_patients, rng), pol, 100, rng)
    truth = float((u @ g ** np.arange(100)).mean())

    z = []
    for r in range(args.reps):
        data = generate_offline(env, args.n, args.T, np.random.default_rng(np.random.SeedSequence([args.seed, r])))
        vm = fit_value_model(data, pol, prop, fm, g)
        s2 = variance_estimate(data, pol, vm.theta, prop, fm, g, vm.nu, cluster=args.cluster)
        z.append((vm.value - truth) / np.sqrt(s2 / args.n))
    z = np.asarray(z)
    print(f"truth {truth:.4f}  coverage {np.mean(np.abs(z) <= 1.96):.3f}  z mean {z.mean():.3f}  z sd {z.std():.3f}")


if __name__ == "__main__":
    main()
