"""Online estimation: patients act under the latest fitted policy while the
data keep accumulating, with refits on a fixed schedule.

Every logged transition stores the probability that the then-active policy
gave the taken action, so refits use those logged probabilities as the
behaviour propensities.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .basis import fit_feature_map
from .data import Dataset
from .ggq import fit_ggq, ggq_policy
from .policy import MixturePolicy, PatientPolicies, Policy, sample_actions, uniform_policy
from .propensity import DEFAULT_FLOOR, PropensityModel
from .simenv import BURN_IN, Environment, burn_in, to_dataset
from .vlearn import SearchConfig, optimize_policy

log = logging.getLogger(__name__)

ESTIMATORS = ("linear", "polynomial2", "gaussian_rbf", "ggq")


@dataclass(frozen=True)
class OnlineConfig:
    """Schedule and estimator settings for one online study.

    Updates happen at ``first_update, first_update + interval, ...`` while
    t < T; an update at t = T would govern no decision and is skipped.
    """

    n: int
    T: int
    estimator: str = "gaussian_rbf"
    gamma: float = 0.9
    first_update: int = 12
    interval: int = 6
    epsilon_base: float = 0.5
    mixing_base: float = 0.5
    burn_in: int = BURN_IN
    floor: float = DEFAULT_FLOOR
    search: SearchConfig = field(default_factory=SearchConfig)
    ggq_restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.T < 1:
            raise ValueError("n and T must be positive")
        if self.first_update < 1 or self.interval < 1:
            raise ValueError("update schedule must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if not 0.0 <= self.epsilon_base <= 1.0 or not 0.0 <= self.mixing_base <= 1.0:
            raise ValueError("exploration bases must lie in [0, 1]")

    @property
    def update_times(self) -> tuple[int, ...]:
        return tuple(range(self.first_update, self.T, self.interval))

    def ggq_epsilon(self, k: int) -> float:
        return self.epsilon_base**k

    def mixing_epsilon(self, k: int) -> float:
        return self.mixing_base**k


class Estimator(Protocol):
    name: str

    def __call__(self, dataset: Dataset, propensity: PropensityModel, k: int, rng: np.random.Generator) -> Policy: ...


@dataclass
class VLearnEstimator:
    basis: str
    gamma: float
    search: SearchConfig = field(default_factory=SearchConfig)

    @property
    def name(self) -> str:
        return f"vl-{self.basis}"

    def __call__(self, dataset, propensity, k, rng):
        fmap = fit_feature_map(self.basis, dataset)
        return optimize_policy(dataset, propensity, fmap, self.gamma, self.search, rng).policy


@dataclass
class GGQEstimator:
    gamma: float
    epsilon: Callable[[int], float]
    restarts: int = 5
    name: str = "ggq"

    def __call__(self, dataset, propensity, k, rng):
        fit = fit_ggq(dataset, self.gamma, self.restarts, rng)
        return ggq_policy(fit, self.epsilon(k))


def make_estimator(config: OnlineConfig) -> Estimator:
    if config.estimator == "ggq":
        return GGQEstimator(config.gamma, config.ggq_epsilon, config.ggq_restarts)
    return VLearnEstimator(config.estimator, config.gamma, config.search)


@dataclass(frozen=True)
class UpdateRecord:
    index: int
    t: int
    estimator: str
    value_so_far: float
    snapshot: str
    seconds: float
    failures: int


@dataclass(eq=False)
class OnlineResult:
    value: float
    utilities: np.ndarray
    dataset: Dataset
    update_times: tuple[int, ...]
    snapshots: list
    records: list[UpdateRecord]
    segments: list[tuple[int, int]]

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["update", "t", "estimator", "value_so_far", "snapshot", "seconds", "failures"])
            for r in self.records:
                w.writerow([r.index, r.t, r.estimator, f"{r.value_so_far:.6g}", r.snapshot, f"{r.seconds:.3f}", r.failures])


def _rngs(config: OnlineConfig, rng):
    if rng is not None:
        return rng, np.random.default_rng(rng.integers(2**63))
    # simulation stream = default_rng(seed), so a frozen run matches a plain rollout
    return np.random.default_rng(config.seed), np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])


def _name(estimator) -> str:
    return getattr(estimator, "name", getattr(estimator, "__name__", "custom"))


def _value_so_far(utils, t, first):
    if t <= first:
        return float("nan")
    return float(utils[:, first:t].mean())


class _Loop:
    """Shared simulate-refit bookkeeping."""

    def __init__(self, env: Environment, config: OnlineConfig, rng):
        self.env, self.config = env, config
        self.sim_rng, self.fit_rng = _rngs(config, rng)
        n, T = config.n, config.T
        self.states = np.empty((n, T + 1, env.state_dim))
        self.actions = np.empty((n, T), dtype=int)
        self.utils = np.empty((n, T))
        self.probs = np.empty((n, T))
        self.sim = burn_in(env, n, self.sim_rng, config.burn_in)
        self.states[:, 0] = self.sim.obs
        self.propensity = PropensityModel.logged(config.floor)

    def dataset(self, t: int) -> Dataset:
        return to_dataset(self.env, self.states[:, : t + 1], self.actions[:, :t], self.utils[:, :t], self.probs[:, :t])

    def advance(self, policy: Policy, start: int, stop: int) -> None:
        n = self.config.n
        for t in range(start, stop):
            P = np.atleast_2d(policy.probabilities(self.sim.obs))
            a = sample_actions(_Rows(P), self.sim.obs, self.sim_rng)
            self.probs[:, t] = P[np.arange(n), a]
            self.sim, u = self.env.step(self.sim, a, self.sim_rng)
            self.actions[:, t] = a
            self.utils[:, t] = u
            self.states[:, t + 1] = self.sim.obs

    def result(self, snapshots, records, segments) -> OnlineResult:
        first = self.config.first_update
        tail = self.utils[:, first:] if self.config.T > first else self.utils
        return OnlineResult(
            float(tail.mean()), self.utils, self.dataset(self.config.T), self.config.update_times, snapshots, records, segments
        )


@dataclass(frozen=True, eq=False)
class _Rows:
    P: np.ndarray

    def probabilities(self, states):
        return self.P


def run_online(
    env: Environment,
    config: OnlineConfig,
    estimator: Estimator | None = None,
    rng: np.random.Generator | None = None,
    initial_policy: Policy | None = None,
) -> OnlineResult:
    """One universal policy, refit on all accumulated data at each update."""
    estimator = estimator or make_estimator(config)
    loop = _Loop(env, config, rng)
    policy = initial_policy or uniform_policy(env.action_count)
    snapshots, records, segments = [policy], [], []
    bounds = list(config.update_times) + [config.T]
    start = 0
    for k, t in enumerate(bounds, start=0):
        loop.advance(policy, start, t)
        segments.append((start, t))
        if t == config.T:
            break
        tic = time.perf_counter()
        failures = 0
        try:
            policy = estimator(loop.dataset(t), loop.propensity, k + 1, loop.fit_rng)
        except Exception as exc:  # keep the previous policy
            failures = 1
            log.warning("update %d at t=%d failed (%s); keeping previous policy", k + 1, t, exc)
        snapshots.append(policy)
        records.append(
            UpdateRecord(k + 1, t, _name(estimator), _value_so_far(loop.utils, t, config.first_update),
                         f"u{k + 1}", time.perf_counter() - tic, failures)
        )
        start = t
    return loop.result(snapshots, records, segments)


def run_online_individualized(
    env: Environment,
    config: OnlineConfig,
    estimator: Estimator | None = None,
    rng: np.random.Generator | None = None,
    initial_policy: Policy | None = None,
) -> OnlineResult:
    """Pooled policy at the first update, then one policy per patient.

    From update k >= 2 patient i acts under
    (1 - eps_k) * own_fit_i + eps_k * pooled_first_fit.
    """
    estimator = estimator or make_estimator(config)
    loop = _Loop(env, config, rng)
    policy = initial_policy or uniform_policy(env.action_count)
    pooled = None
    snapshots, records, segments = [policy], [], []
    bounds = list(config.update_times) + [config.T]
    start = 0
    for k, t in enumerate(bounds, start=0):
        loop.advance(policy, start, t)
        segments.append((start, t))
        if t == config.T:
            break
        tic = time.perf_counter()
        data = loop.dataset(t)
        failures = 0
        if pooled is None:
            try:
                pooled = estimator(data, loop.propensity, k + 1, loop.fit_rng)
                policy = pooled
            except Exception as exc:
                failures = 1
                log.warning("pooled update at t=%d failed (%s); keeping previous policy", t, exc)
        else:
            eps = config.mixing_epsilon(k + 1)
            own = []
            for i in range(config.n):
                try:
                    fit = estimator(data.subset([i]), loop.propensity, k + 1, loop.fit_rng)
                    own.append(MixturePolicy(fit, pooled, eps))
                except Exception as exc:
                    failures += 1
                    log.info("patient %d fit at t=%d failed (%s); using pooled policy", i, t, exc)
                    own.append(pooled)
            policy = PatientPolicies(tuple(own))
        snapshots.append(policy)
        records.append(
            UpdateRecord(k + 1, t, _name(estimator), _value_so_far(loop.utils, t, config.first_update),
                         f"u{k + 1}", time.perf_counter() - tic, failures)
        )
        start = t
    return loop.result(snapshots, records, segments)
