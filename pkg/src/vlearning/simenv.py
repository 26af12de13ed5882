"""Generative environments, offline data generation and rollout evaluation.

Environments are vectorised over patients: ``reset`` returns a
:class:`SimState` for ``n`` patients and ``step`` advances all of them by one
decision.  A single ``numpy.random.Generator`` drives each simulation, so
every generator is a pure function of its configuration and seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .basis import FeatureMap
from .data import Dataset, Trajectory, UtilityKind, UtilitySpec, glycemic_weight, toy_utility
from .policy import ConstantPolicy, Policy, sample_actions
from .propensity import PropensityModel

BURN_IN = 50


@dataclass(eq=False)
class SimState:
    obs: np.ndarray
    hidden: dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.obs.shape[0])


class Environment:
    action_count: int
    state_dim: int
    utility_spec: UtilitySpec = UtilitySpec(UtilityKind.CUSTOM_COLUMN)
    action_labels: tuple[str, ...] | None = None

    def behavior_policy(self) -> Policy:
        raise NotImplementedError

    def behavior_propensity(self) -> PropensityModel:
        return PropensityModel.known(self.behavior_policy().probs)

    def reset(self, n: int, rng: np.random.Generator) -> SimState:
        raise NotImplementedError

    def step(self, sim: SimState, actions: np.ndarray, rng: np.random.Generator):
        """Advance every patient; returns (next SimState, utilities)."""
        raise NotImplementedError


# ---------------------------------------------------------------------------
# two-covariate toy model


def toy_step(state, action, rng: np.random.Generator | None = None, coef=0.75, noise_sd=0.5):
    """S1' = c(2A-1)S1 + S1 S2/4 + e1,  S2' = c(1-2A)S2 + S1 S2/4 + e2.

    Vectorised over leading axes of ``state``; ``coef`` may be per patient.
    """
    S = np.asarray(state, dtype=float)
    sign = 2.0 * np.asarray(action, dtype=float) - 1.0
    c = np.asarray(coef, dtype=float)
    inter = 0.25 * S[..., 0] * S[..., 1]
    out = np.stack([c * sign * S[..., 0] + inter, -c * sign * S[..., 1] + inter], axis=-1)
    if noise_sd > 0:
        if rng is None:
            raise ValueError("rng required when noise is on")
        out = out + noise_sd * rng.standard_normal(out.shape)
    return out


@dataclass
class ToyEnv(Environment):
    """Binary-treatment model where treatment helps S1 and hurts S2.

    ``heterogeneous=True`` replaces the 3/4 coefficient by a per-patient draw
    from Uniform(mu_low, mu_high).  The S1*S2 cross term makes the raw
    recursion explosive for coefficients near 1, so each component is clipped
    to [-state_bound, state_bound] after every step (None disables this).
    """

    coef: float = 0.75
    noise_sd: float = 0.5
    heterogeneous: bool = False
    mu_low: float = 0.4
    mu_high: float = 0.9
    treat_prob: float = 0.5
    state_bound: float | None = 10.0

    action_count = 2
    state_dim = 2
    utility_spec = UtilitySpec(UtilityKind.SIMPLE_TOY)

    def behavior_policy(self) -> ConstantPolicy:
        return ConstantPolicy([1.0 - self.treat_prob, self.treat_prob])

    def reset(self, n, rng):
        obs = rng.standard_normal((n, 2))
        if self.heterogeneous:
            coef = rng.uniform(self.mu_low, self.mu_high, size=n)
        else:
            coef = np.full(n, self.coef)
        return SimState(obs, {"coef": coef})

    def step(self, sim, actions, rng):
        nxt = toy_step(sim.obs, actions, rng, sim.hidden["coef"], self.noise_sd)
        if self.state_bound is not None:
            nxt = np.clip(nxt, -self.state_bound, self.state_bound)
        u = toy_utility(nxt, actions)
        return SimState(nxt, sim.hidden), np.asarray(u, dtype=float)


# ---------------------------------------------------------------------------
# type 1 diabetes glucose model

T1D_ALPHA = (0.9, 0.1, 0.1, -0.01, -0.01, -2.0, -4.0)
T1D_ACTION_LABELS = (
    "No action",
    "Physical activity",
    "Food intake",
    "Food and activity",
    "Insulin",
    "Insulin and activity",
    "Insulin and food",
    "Insulin, food, and activity",
)
T1D_STATE_NAMES = ("gl_1", "gl_2", "ex_1", "ex_2", "di_1", "di_2", "di_3", "di_4")


def t1d_glucose(history, insulin, insulin_prev, alpha=T1D_ALPHA, mu=100.0, noise=0.0):
    """Next-interval glucose from the lag-2 linear recursion.

    ``history`` holds states laid out as (gl_1, gl_2, ex_1, ex_2, di_1, ..., di_4)
    where suffix 1 is the most recent interval.
    """
    H = np.asarray(history, dtype=float)
    a1, a2, a3, a4, a5, a6, a7 = alpha
    return (
        mu * (1 - a1)
        + a1 * H[..., 0]
        + a2 * H[..., 4]
        + a3 * H[..., 5]
        + a4 * H[..., 2]
        + a5 * H[..., 3]
        + a6 * np.asarray(insulin, dtype=float)
        + a7 * np.asarray(insulin_prev, dtype=float)
        + noise
    )


@dataclass
class T1DEnv(Environment):
    """Simulated glucose / diet / activity cohort with hourly insulin decisions.

    State: glucose and activity counts for the previous two intervals and
    food grams for the previous four.  In ``multi_action`` mode the action
    indexes the 8 combinations 4*insulin + 2*food + activity and the policy
    chooses whether the patient eats or exercises in the coming interval;
    otherwise food and activity are exogenous random events.
    """

    alpha: tuple[float, ...] = T1D_ALPHA
    mu: float = 100.0
    sigma: float = 5.5
    p_insulin: float = 0.3
    p_food: float = 0.2
    p_mild: float = 0.4
    p_moderate: float = 0.2
    food_mean: float = 190.0
    food_sd: float = 60.0
    mild_mean: float = 75.0
    mild_sd: float = 22.5
    moderate_mean: float = 225.0
    moderate_sd: float = 60.0
    init_mean: float = 100.0
    init_sd: float = 25.0
    multi_action: bool = False

    state_dim = 8
    utility_spec = UtilitySpec(UtilityKind.GLYCEMIC, glucose_index=0)

    def __post_init__(self):
        if not self.alpha[0] < 1:
            raise ValueError("alpha_1 must be below 1 for a stationary glucose process")

    @property
    def action_count(self) -> int:
        return 8 if self.multi_action else 2

    @property
    def action_labels(self):
        return T1D_ACTION_LABELS if self.multi_action else ("No insulin", "Insulin")

    def behavior_policy(self) -> ConstantPolicy:
        if not self.multi_action:
            return ConstantPolicy([1 - self.p_insulin, self.p_insulin])
        p_act = self.p_mild + self.p_moderate
        probs = np.empty(8)
        for a in range(8):
            i, f, x = a >> 2 & 1, a >> 1 & 1, a & 1
            probs[a] = (
                (self.p_insulin if i else 1 - self.p_insulin)
                * (self.p_food if f else 1 - self.p_food)
                * (p_act if x else 1 - p_act)
            )
        return ConstantPolicy(probs)

    def reset(self, n, rng):
        obs = np.zeros((n, 8))
        g0 = rng.normal(self.init_mean, self.init_sd, size=n)
        obs[:, 0] = g0
        obs[:, 1] = g0
        return SimState(obs, {"insulin_prev": np.zeros(n)})

    def _food(self, eat, rng):
        grams = np.maximum(rng.normal(self.food_mean, self.food_sd, size=eat.shape), 0.0)
        return np.where(eat, grams, 0.0)

    def _activity(self, level, rng):
        mild = np.maximum(rng.normal(self.mild_mean, self.mild_sd, size=level.shape), 0.0)
        mod = np.maximum(rng.normal(self.moderate_mean, self.moderate_sd, size=level.shape), 0.0)
        return np.where(level == 1, mild, np.where(level == 2, mod, 0.0))

    def decode(self, actions):
        a = np.asarray(actions, dtype=int)
        if self.multi_action:
            return a >> 2 & 1, a >> 1 & 1, a & 1
        return a, None, None

    def step(self, sim, actions, rng):
        n = sim.n
        H = sim.obs
        insulin, food_on, act_on = self.decode(actions)
        e = rng.normal(0.0, self.sigma, size=n)
        gl = t1d_glucose(H, insulin, sim.hidden["insulin_prev"], self.alpha, self.mu, e)
        u = rng.random(n)
        p_act = self.p_mild + self.p_moderate
        if self.multi_action:
            eat = food_on.astype(bool)
            # active patients exercise mildly or moderately in the base-rate ratio
            level = np.where(act_on.astype(bool), np.where(u < self.p_mild / p_act, 1, 2), 0)
        else:
            eat = rng.random(n) < self.p_food
            level = np.where(u < self.p_mild, 1, np.where(u < p_act, 2, 0))
        di = self._food(eat, rng)
        ex = self._activity(level, rng)
        nxt = np.column_stack([gl, H[:, 0], ex, H[:, 2], di, H[:, 4], H[:, 5], H[:, 6]])
        util = (glycemic_weight(H[:, 0]) + glycemic_weight(gl)).astype(float)
        return SimState(nxt, {"insulin_prev": np.asarray(insulin, dtype=float)}), util


def t1d_step(history, insulin, rng, env: T1DEnv | None = None, insulin_prev=0.0):
    """Single-step convenience wrapper around :class:`T1DEnv` for one or more patients."""
    env = env or T1DEnv()
    H = np.atleast_2d(np.asarray(history, dtype=float))
    prev = np.broadcast_to(np.asarray(insulin_prev, dtype=float), (H.shape[0],)).copy()
    sim = SimState(H, {"insulin_prev": prev})
    nxt, u = env.step(sim, np.broadcast_to(np.asarray(insulin), (H.shape[0],)), rng)
    return nxt.obs, u


# ---------------------------------------------------------------------------
# finite MDP (test oracle)


@dataclass(eq=False)
class FiniteMDP(Environment):
    """Tabular MDP with transition tensor P[a, s, s'] and utilities R[a, s, s'].

    The observed state is the state index as a one-element float vector.
    """

    P: np.ndarray = None
    R: np.ndarray = None
    initial: np.ndarray | None = None
    behavior: np.ndarray | None = None

    state_dim = 1

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        K, m, _ = self.P.shape
        if not np.allclose(self.P.sum(axis=2), 1.0):
            raise ValueError("transition rows must sum to one")
        R = np.asarray(self.R, dtype=float)
        if R.ndim == 2:
            R = np.repeat(R[:, :, None], m, axis=2)
        self.R = np.broadcast_to(R, (K, m, m)).copy()
        self.initial = np.full(m, 1.0 / m) if self.initial is None else np.asarray(self.initial, dtype=float)
        self.behavior = np.full(K, 1.0 / K) if self.behavior is None else np.asarray(self.behavior, dtype=float)

    @property
    def action_count(self) -> int:
        return int(self.P.shape[0])

    @property
    def n_states(self) -> int:
        return int(self.P.shape[1])

    @property
    def states(self) -> np.ndarray:
        return np.arange(self.n_states, dtype=float)[:, None]

    def behavior_policy(self):
        return ConstantPolicy(self.behavior)

    def reset(self, n, rng):
        s = rng.choice(self.n_states, size=n, p=self.initial)
        return SimState(s.astype(float)[:, None])

    def step(self, sim, actions, rng):
        s = sim.obs[:, 0].astype(int)
        a = np.asarray(actions, dtype=int)
        cdf = np.cumsum(self.P[a, s], axis=1)
        s1 = np.minimum((rng.random(s.size)[:, None] >= cdf).sum(axis=1), self.n_states - 1)
        return SimState(s1.astype(float)[:, None]), self.R[a, s, s1]

    def policy_matrix(self, policy: Policy) -> np.ndarray:
        return np.atleast_2d(policy.probabilities(self.states))

    def dp_value(self, policy: Policy, gamma: float) -> np.ndarray:
        """Solve (I - gamma P_pi) V = r_pi."""
        Pi = self.policy_matrix(policy)  # (m, K)
        P_pi = np.einsum("sa,ast->st", Pi, self.P)
        r_pi = np.einsum("sa,ast,ast->s", Pi, self.P, self.R)
        return np.linalg.solve(np.eye(self.n_states) - gamma * P_pi, r_pi)

    def stationary(self, policy: Policy | None = None) -> np.ndarray:
        Pi = self.policy_matrix(policy or self.behavior_policy())
        P_pi = np.einsum("sa,ast->st", Pi, self.P)
        vals, vecs = np.linalg.eig(P_pi.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return v / v.sum()

    def population_system(self, policy: Policy, feature_map: FeatureMap, gamma: float, state_weights=None):
        """Expected per-transition A and b under the behaviour policy.

        ``state_weights`` defaults to the behaviour policy's stationary law.
        """
        from .vlearn import BellmanSystem

        d = self.stationary() if state_weights is None else np.asarray(state_weights, dtype=float)
        phi = feature_map.transform(self.states)
        mu = self.behavior
        pi = self.policy_matrix(policy)
        q = phi.shape[1]
        A = np.zeros((q, q))
        b = np.zeros(q)
        for s in range(self.n_states):
            for a in range(self.action_count):
                w = pi[s, a] / mu[a]
                for s1 in range(self.n_states):
                    pr = d[s] * mu[a] * self.P[a, s, s1]
                    A += pr * w * np.outer(phi[s], phi[s] - gamma * phi[s1])
                    b += pr * w * self.R[a, s, s1] * phi[s]
        return BellmanSystem(A, b, gamma, 1, 1)


# ---------------------------------------------------------------------------
# registry

ENVIRONMENTS = ("toy", "toy_hetero", "t1d", "t1d_multi")


def make_env(name: str, **overrides) -> Environment:
    if name == "toy":
        return ToyEnv(**overrides)
    if name == "toy_hetero":
        return ToyEnv(heterogeneous=True, **overrides)
    if name == "t1d":
        return T1DEnv(**overrides)
    if name == "t1d_multi":
        return T1DEnv(multi_action=True, **overrides)
    raise ValueError(f"unknown environment {name!r}; expected one of {ENVIRONMENTS}")


# ---------------------------------------------------------------------------
# data generation and evaluation


def burn_in(env: Environment, n: int, rng, steps: int = BURN_IN, policy: Policy | None = None) -> SimState:
    policy = policy or env.behavior_policy()
    sim = env.reset(n, rng)
    for _ in range(steps):
        a = sample_actions(policy, sim.obs, rng)
        sim, _ = env.step(sim, a, rng)
    return sim


def simulate(env: Environment, sim: SimState, policy: Policy, T: int, rng):
    """Follow ``policy`` for T steps; returns arrays (states, actions, utilities, probs).

    ``probs`` holds the probability the policy gave each taken action.
    """
    n = sim.n
    states = np.empty((n, T + 1, env.state_dim))
    actions = np.empty((n, T), dtype=int)
    utils = np.empty((n, T))
    probs = np.empty((n, T))
    states[:, 0] = sim.obs
    for t in range(T):
        P = np.atleast_2d(policy.probabilities(sim.obs))
        a = sample_actions(_Fixed(P), sim.obs, rng)
        probs[:, t] = P[np.arange(n), a]
        sim, u = env.step(sim, a, rng)
        actions[:, t] = a
        utils[:, t] = u
        states[:, t + 1] = sim.obs
    return states, actions, utils, probs, sim


@dataclass(frozen=True, eq=False)
class _Fixed:
    P: np.ndarray

    @property
    def action_count(self):
        return self.P.shape[1]

    def probabilities(self, states):
        return self.P


def to_dataset(env: Environment, states, actions, utils, probs, ids=None) -> Dataset:
    n = states.shape[0]
    ids = ids if ids is not None else [str(i + 1) for i in range(n)]
    trajs = tuple(Trajectory(ids[i], states[i], actions[i], utils[i], None, probs[i]) for i in range(n))
    return Dataset(trajs, env.action_count, env.state_dim)


def generate_offline(
    env: Environment,
    n: int,
    T: int,
    rng: np.random.Generator,
    behavior_policy: Policy | None = None,
    burn_in_steps: int = BURN_IN,
) -> Dataset:
    """n patients followed for T decisions after a discarded burn-in."""
    if n < 1 or T < 1:
        raise ValueError("n and T must be positive")
    policy = behavior_policy or env.behavior_policy()
    sim = burn_in(env, n, rng, burn_in_steps, policy)
    states, actions, utils, probs, _ = simulate(env, sim, policy, T, rng)
    return to_dataset(env, states, actions, utils, probs)


def rollout_value(
    env: Environment,
    policy: Policy,
    rng: np.random.Generator,
    n_eval: int = 100,
    T_eval: int = 100,
    burn_in_steps: int = BURN_IN,
) -> float:
    """Mean undiscounted utility of ``policy`` over n_eval patients and T_eval steps.

    Patients start from the behaviour policy's burn-in distribution, the
    same protocol as data generation.
    """
    sim = burn_in(env, n_eval, rng, burn_in_steps)
    _, _, utils, _, _ = simulate(env, sim, policy, T_eval, rng)
    return float(utils.mean())
