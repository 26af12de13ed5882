"""Monte Carlo experiment runner for offline and online policy estimation.

Each replication draws its own SeedSequence child, so rows are a function of
(config, seed) alone and replications can run in any order or in parallel.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import fit_feature_map
from .data import Dataset
from .ggq import fit_ggq, ggq_policy
from .online import OnlineConfig, run_online, run_online_individualized
from .policy import Policy
from .propensity import PropensityModel, fit_logistic_propensity
from .simenv import BURN_IN, Environment, T1DEnv, generate_offline, make_env, rollout_value
from .vlearn import SearchConfig, optimize_policy

log = logging.getLogger(__name__)

OFFLINE_METHODS = ("linear", "polynomial2", "gaussian_rbf", "ggq")
METHOD_LABELS = {
    "linear": "Linear VL",
    "polynomial2": "Polynomial VL",
    "gaussian_rbf": "Gaussian VL",
    "ggq": "GGQ",
    "observed": "Observed",
    "universal": "Universal policy",
    "individualized": "Patient-specific policy",
}
CSV_HEADER = ("method", "n", "T", "gamma", "mean_value", "mc_sd", "mc_se", "replications")


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    n: int
    T: int
    gamma: float = 0.9
    replications: int = 100
    methods: tuple[str, ...] = OFFLINE_METHODS
    seed: int = 0
    mode: str = "offline"  # offline | online | individualized
    n_eval: int = 100
    T_eval: int = 100
    burn_in: int = BURN_IN
    include_observed: bool = True
    search: SearchConfig = field(default_factory=SearchConfig)
    ggq_restarts: int = 5

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replication count must be at least 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if self.n < 1 or self.T < 1:
            raise ValueError("n and T must be positive")
        if self.mode not in ("offline", "online", "individualized"):
            raise ValueError(f"unknown mode {self.mode!r}")
        bad = [m for m in self.methods if m not in OFFLINE_METHODS + ("universal", "individualized")]
        if bad:
            raise ValueError(f"unknown methods {bad}")


@dataclass(frozen=True)
class ResultRow:
    method: str
    n: int
    T: int
    gamma: float
    mean_value: float
    mc_sd: float
    mc_se: float
    replications: int

    @classmethod
    def from_values(cls, method, n, T, gamma, values) -> "ResultRow":
        v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
        k = v.size
        mean = float(v.mean()) if k else float("nan")
        sd = float(v.std(ddof=1)) if k > 1 else 0.0 if k == 1 else float("nan")
        se = sd / math.sqrt(k) if k else float("nan")
        return cls(method, n, T, gamma, mean, sd, se, k)

    def as_csv(self) -> list[str]:
        return [self.method, str(self.n), str(self.T), repr(self.gamma), repr(self.mean_value),
                repr(self.mc_sd), repr(self.mc_se), str(self.replications)]


@dataclass(eq=False)
class ExperimentResult:
    config: ExperimentConfig
    rows: list[ResultRow]
    values: dict[str, list[float]]

    def row(self, method: str) -> ResultRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def discounted_observed_value(dataset: Dataset, gamma: float) -> float:
    """Mean over patients of sum_t gamma^t U_t from each trajectory's start."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    if dataset.n == 0:
        raise ValueError("empty dataset")
    totals = []
    for tr in dataset.trajectories:
        u = np.asarray(tr.utilities, dtype=float)
        totals.append(float(u @ gamma ** np.arange(u.size)))
    return float(np.mean(totals))


def report_action_probabilities(policy: Policy, state, labels=None) -> list[tuple[str, str]]:
    """(label, probability to 4 decimals) per action."""
    p = np.asarray(policy.probabilities(np.asarray(state, dtype=float).reshape(1, -1))).reshape(-1)
    labels = labels or [f"action {a}" for a in range(p.size)]
    if len(labels) != p.size:
        raise ValueError("one label per action required")
    return [(lab, "< 0.0001" if 0 < x < 5e-5 else f"{x:.4f}") for lab, x in zip(labels, p)]


def format_probability_table(rows) -> str:
    width = max(len(lab) for lab, _ in rows)
    return "\n".join(f"{lab:<{width}}  {val}" for lab, val in rows)


def _propensity_for(env: Environment, dataset: Dataset) -> PropensityModel:
    # randomisation probabilities are known for the toy trial, estimated for the cohort model
    if isinstance(env, T1DEnv):
        return fit_logistic_propensity(dataset)
    return env.behavior_propensity()


def _fit_offline(method, env, data, prop, config, seed) -> Policy:
    rng = np.random.default_rng(seed)
    if method == "ggq":
        return ggq_policy(fit_ggq(data, config.gamma, config.ggq_restarts, rng))
    fmap = fit_feature_map(method, data)
    return optimize_policy(data, prop, fmap, config.gamma, config.search, rng).policy


def _offline_replication(config: ExperimentConfig, r: int) -> dict[str, float]:
    env = make_env(config.env)
    data_ss, fit_ss, eval_ss = np.random.SeedSequence([config.seed, r]).spawn(3)
    data = generate_offline(env, config.n, config.T, np.random.default_rng(data_ss), burn_in_steps=config.burn_in)
    prop = _propensity_for(env, data)
    out = {}
    fit_seeds = fit_ss.spawn(len(config.methods))
    eval_seed = eval_ss.generate_state(2)
    for method, fs in zip(config.methods, fit_seeds):
        try:
            policy = _fit_offline(method, env, data, prop, config, fs)
        except Exception as exc:  # missing cell, run continues
            log.warning("replication %d: %s failed (%s)", r, method, exc)
            out[method] = float("nan")
            continue
        # common evaluation stream across methods
        out[method] = rollout_value(env, policy, np.random.default_rng(eval_seed), config.n_eval, config.T_eval, config.burn_in)
    if config.include_observed:
        out["observed"] = rollout_value(
            env, env.behavior_policy(), np.random.default_rng(eval_seed), config.n_eval, config.T_eval, config.burn_in
        )
    return out


def _online_replication(config: ExperimentConfig, r: int) -> dict[str, float]:
    env = make_env(config.env)
    out = {}
    seed = int(np.random.SeedSequence([config.seed, r]).generate_state(1)[0])
    for method in config.methods:
        estimator = "gaussian_rbf" if method in ("universal", "individualized") else method
        oc = OnlineConfig(config.n, config.T, estimator=estimator, gamma=config.gamma, burn_in=config.burn_in,
                          search=config.search, ggq_restarts=config.ggq_restarts, seed=seed)
        runner = run_online_individualized if method == "individualized" else run_online
        try:
            out[method] = runner(env, oc).value
        except Exception as exc:
            log.warning("replication %d: %s failed (%s)", r, method, exc)
            out[method] = float("nan")
    return out


def _replication(args):
    config, r = args
    if config.mode == "offline":
        return _offline_replication(config, r)
    return _online_replication(config, r)


def run_offline_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Replicate generate -> fit -> rollout and aggregate per method.

    ``mode`` other than offline runs the online loop instead; the name is
    kept since both share aggregation.
    """
    jobs = [(config, r) for r in range(config.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_rep = list(pool.map(_replication, jobs))
    else:
        per_rep = [_replication(j) for j in jobs]
    methods = list(config.methods) + (["observed"] if config.mode == "offline" and config.include_observed else [])
    values = {m: [rep.get(m, float("nan")) for rep in per_rep] for m in methods}
    rows = [ResultRow.from_values(m, config.n, config.T, config.gamma, values[m]) for m in methods]
    return ExperimentResult(config, rows, values)


run_experiment = run_offline_experiment


def write_rows(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def read_rows(path: str | Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected header {rd.fieldnames}")
        return [
            ResultRow(d["method"], int(d["n"]), int(d["T"]), float(d["gamma"]), float(d["mean_value"]),
                      float(d["mc_sd"]), float(d["mc_se"]), int(d["replications"]))
            for d in rd
        ]


def write_replications(results, path: str | Path) -> None:
    """Per-replication values of one or more experiments, full precision."""
    if isinstance(results, ExperimentResult):
        results = [results]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", "T", "replication", "value"])
        for res in results:
            for m, vals in res.values.items():
                for r, v in enumerate(vals):
                    w.writerow([m, res.config.n, res.config.T, r, repr(float(v))])


# ---------------------------------------------------------------------------
# table grids

GRID_N = (25, 50, 100)
GRID_T = (24, 36, 48)


@dataclass(frozen=True)
class TableSpec:
    env: str
    mode: str
    methods: tuple[str, ...]
    observed: bool
    cells: tuple[tuple[int, int], ...]


TABLES = {
    1: TableSpec("toy", "offline", OFFLINE_METHODS, True, tuple((n, T) for n in GRID_N for T in GRID_T)),
    2: TableSpec("t1d", "offline", OFFLINE_METHODS, True, tuple((n, T) for n in GRID_N for T in GRID_T)),
    3: TableSpec("toy", "online", OFFLINE_METHODS, False, tuple((n, T) for n in GRID_N for T in GRID_T)),
    4: TableSpec("t1d", "online", OFFLINE_METHODS, False, tuple((n, T) for n in GRID_N for T in GRID_T)),
    5: TableSpec("toy_hetero", "online", ("universal", "individualized"), False,
                 tuple((n, T) for n in GRID_N for T in GRID_T)),
}


def table_configs(table: int, replications: int, seed: int = 0, gamma: float = 0.9, cells=None,
                  search: SearchConfig | None = None) -> list[ExperimentConfig]:
    if table not in TABLES:
        raise ValueError(f"table must be one of {sorted(TABLES)}")
    if replications < 1:
        raise ValueError("replication count must be at least 1")
    spec = TABLES[table]
    out = []
    for n, T in cells or spec.cells:
        cfg = ExperimentConfig(spec.env, n, T, gamma, replications, spec.methods, seed, spec.mode,
                               include_observed=spec.observed)
        out.append(replace(cfg, search=search) if search is not None else cfg)
    return out


def reproduce_table(table: int, replications: int, seed: int = 0, cells=None, workers: int = 1,
                    search: SearchConfig | None = None) -> list[ExperimentResult]:
    return [run_offline_experiment(c, workers) for c in table_configs(table, replications, seed, cells=cells, search=search)]


def format_grid(results: list[ExperimentResult]) -> str:
    """n/T rows, one 'mean (sd)' column per method."""
    methods = [r.method for r in results[0].rows]
    head = ["n", "T"] + [METHOD_LABELS.get(m, m) for m in methods]
    lines = [" | ".join(head)]
    for res in results:
        cells = []
        for r in res.rows:
            cells.append(f"{r.mean_value:.4f}" if r.method == "observed" else f"{r.mean_value:.4f} ({r.mc_sd:.4f})")
        lines.append(" | ".join([str(res.config.n), str(res.config.T)] + cells))
    return "\n".join(lines)
