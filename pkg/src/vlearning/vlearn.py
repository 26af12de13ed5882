"""V-learning: importance-weighted Bellman estimating equation and policy search.

For a fixed policy the linear working model V(s) = phi(s)'theta turns the
estimating equation into a linear system Lambda_n(theta) = b - A theta with

    A = (1/n) sum_i sum_t w_it phi(s_it) {phi(s_it) - gamma phi(s_i,t+1)}'
    b = (1/n) sum_i sum_t w_it U_it phi(s_it),     w = pi(a; s) / mu(a; s).

theta is the ridge-penalised least-squares solution of that system and the
policy value is nu'theta for a reference feature mean nu.  The policy search
maximises the penalised value over a softmax class by annealing followed by
BFGS.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .basis import FeatureMap
from .data import Dataset
from .policy import Policy, SoftmaxPolicy, softmax_last_reference, with_intercept
from .propensity import PropensityModel

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BellmanSystem:
    A: np.ndarray
    b: np.ndarray
    gamma: float
    n: int
    n_transitions: int

    def residual(self, theta) -> np.ndarray:
        """Lambda_n(theta) = b - A theta."""
        return self.b - self.A @ np.asarray(theta, dtype=float)


@dataclass(frozen=True, eq=False)
class ValueModel:
    theta: np.ndarray
    feature_map: FeatureMap
    nu: np.ndarray
    gamma: float

    def state_value(self, states) -> np.ndarray:
        return self.feature_map.transform(states) @ self.theta

    @property
    def value(self) -> float:
        return float(self.nu @ self.theta)


@dataclass
class SearchConfig:
    """Settings for the annealing + quasi-Newton policy search.

    ``beta_penalty``/``theta_penalty`` of ``None`` mean the data-scaled
    defaults 0.1 / sqrt(transitions) and n ** -0.75.
    """

    anneal_evals: int = 1000
    anneal_temperature: float = 1.0
    anneal_tmax: int = 10
    anneal_scale: float = 1.0
    bound: float = 10.0
    bfgs_gtol: float = 1e-5
    bfgs_maxiter: int = 200
    fd_step: float = 1e-5
    beta_penalty: float | None = None
    theta_penalty: float | None = None
    seed: int | None = 0

    def __post_init__(self):
        for name in ("beta_penalty", "theta_penalty"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.anneal_evals < 0 or self.bound <= 0:
            raise ValueError("invalid search budget or bound")


def default_theta_penalty(n: int) -> float:
    return float(n) ** -0.75


def default_beta_penalty(n_transitions: int) -> float:
    return 0.1 / math.sqrt(n_transitions)


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")


# ---------------------------------------------------------------------------
# linear system


def _system(phi, D, U, w, n, gamma) -> BellmanSystem:
    Pw = phi.T * w
    return BellmanSystem(Pw @ D / n, Pw @ U / n, gamma, n, phi.shape[0])


def assemble_system(
    dataset: Dataset,
    policy: Policy,
    propensity: PropensityModel,
    feature_map: FeatureMap,
    gamma: float,
    weight_scale: float = 1.0,
) -> BellmanSystem:
    """Importance-weighted Bellman system summed over all in-follow-up transitions.

    ``weight_scale`` multiplies every importance weight (used to check
    linearity of the system in the weights).
    """
    _check_gamma(gamma)
    tr = dataset.transitions
    if tr.size == 0:
        raise ValueError("no transitions to assemble")
    phi = feature_map.transform(tr.states)
    D = phi - gamma * feature_map.transform(tr.next_states)
    w = importance_weights(dataset, policy, propensity) * weight_scale
    return _system(phi, D, tr.utilities, w, dataset.n, gamma)


def importance_weights(dataset: Dataset, policy: Policy, propensity: PropensityModel) -> np.ndarray:
    tr = dataset.transitions
    P = policy.probabilities(tr.states)
    pi = P[np.arange(tr.size), tr.actions]
    return pi / propensity.for_dataset(dataset)


def solve_theta(system: BellmanSystem, lambda_n: float) -> np.ndarray:
    """argmin ||A theta - b||^2 + lambda_n ||theta||^2."""
    return _ridge(system.A, system.b, lambda_n)


def _ridge(A, b, lam):
    if lam < 0:
        raise ValueError("lambda_n must be non-negative")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("Bellman system has non-finite entries")
    q = A.shape[1]
    if lam > 0:
        M = np.vstack([A, math.sqrt(lam) * np.eye(q)])
        r = np.concatenate([b, np.zeros(q)])
        return np.linalg.lstsq(M, r, rcond=None)[0]
    theta, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < q:
        warnings.warn("singular Bellman system; using the pseudo-inverse solution", RuntimeWarning, stacklevel=3)
    return theta


def reference_vector(dataset: Dataset, feature_map: FeatureMap, mode: str = "all_states") -> np.ndarray:
    """Feature mean over all observed states, or over each patient's first state."""
    if mode == "all_states":
        states = dataset.observed_states
    elif mode == "initial_states":
        states = dataset.initial_states
    else:
        raise ValueError(f"unknown reference mode {mode!r}")
    return feature_map.transform(states).mean(axis=0)


def estimate_value(theta, nu) -> float:
    theta, nu = np.asarray(theta, dtype=float), np.asarray(nu, dtype=float)
    if theta.shape != nu.shape:
        raise ValueError("theta and nu dimensions differ")
    return float(nu @ theta)


def variance_estimate(
    dataset: Dataset,
    policy: Policy,
    theta,
    propensity: PropensityModel,
    feature_map: FeatureMap,
    gamma: float,
    nu,
    max_condition: float = 1e12,
    cluster: bool = False,
) -> float:
    """Plug-in asymptotic variance of sqrt(n) (V_hat - V).

    sigma^2 = nu' W1^{-1} W0 W1^{-T} nu with per-patient moments

        W1 = (1/n) sum w phi (phi - gamma phi')'
        W0 = (1/n) sum w^2 delta^2 phi phi',  delta = U + gamma phi''theta - phi'theta

    so that V_hat +- 1.96 sigma / sqrt(n) is the nominal 95% interval.
    ``cluster=True`` sums w delta phi within each patient before taking
    outer products, which stays valid when residuals are serially
    correlated (a misspecified basis).
    """
    tr = dataset.transitions
    phi = feature_map.transform(tr.states)
    phi1 = feature_map.transform(tr.next_states)
    theta = np.asarray(theta, dtype=float)
    w = importance_weights(dataset, policy, propensity)
    delta = tr.utilities + gamma * phi1 @ theta - phi @ theta
    n = dataset.n
    W1 = (phi.T * w) @ (phi - gamma * phi1) / n
    if cluster:
        G = np.zeros((n, phi.shape[1]))
        np.add.at(G, tr.patient, (w * delta)[:, None] * phi)
        W0 = G.T @ G / n
    else:
        W0 = (phi.T * (w * delta) ** 2) @ phi / n
    if np.linalg.cond(W1) > max_condition:
        raise np.linalg.LinAlgError("W1 is numerically singular; reduce the basis")
    g = np.linalg.solve(W1.T, np.asarray(nu, dtype=float))
    return max(float(g @ W0 @ g), 0.0)


# ---------------------------------------------------------------------------
# repeated evaluation for policy search


class PolicyEvaluator:
    """Precomputes features and propensities of one dataset so that the value
    of many softmax policies can be evaluated cheaply.

    Policy coefficients are searched in standardized state coordinates;
    :meth:`to_policy` maps them back to a raw-state :class:`SoftmaxPolicy`.
    """

    def __init__(
        self,
        dataset: Dataset,
        propensity: PropensityModel,
        feature_map: FeatureMap,
        gamma: float,
        theta_penalty: float | None = None,
        reference: str = "all_states",
        mu: np.ndarray | None = None,
    ):
        _check_gamma(gamma)
        tr = dataset.transitions
        self.dataset = dataset
        self.feature_map = feature_map
        self.gamma = gamma
        self.K = dataset.action_count
        self.n = dataset.n
        self.N = tr.size
        self.actions = tr.actions
        self.U = tr.utilities
        self.phi = feature_map.transform(tr.states)
        self.phi_next = feature_map.transform(tr.next_states)
        self.D = self.phi - gamma * self.phi_next
        self.mu = propensity.for_dataset(dataset) if mu is None else np.asarray(mu, dtype=float)
        self.nu = reference_vector(dataset, feature_map, reference)
        self.lam = default_theta_penalty(self.n) if theta_penalty is None else theta_penalty
        S = tr.states
        self.center = S.mean(axis=0)
        spread = S.std(axis=0)
        spread[spread == 0] = 1.0
        self.spread = spread
        self.X = with_intercept((S - self.center) / spread)
        self.shape = (self.K - 1, self.X.shape[1])
        self._rows = np.arange(self.N)

    def to_policy(self, beta_std) -> SoftmaxPolicy:
        B = np.asarray(beta_std, dtype=float).reshape(self.shape)
        slopes = B[:, 1:] / self.spread
        intercept = B[:, 0] - slopes @ self.center
        return SoftmaxPolicy(np.hstack([intercept[:, None], slopes]), self.K)

    def from_policy(self, policy: SoftmaxPolicy) -> np.ndarray:
        slopes = policy.beta[:, 1:] * self.spread
        intercept = policy.beta[:, 0] + policy.beta[:, 1:] @ self.center
        return np.hstack([intercept[:, None], slopes]).ravel()

    def weights_std(self, beta_std) -> np.ndarray:
        B = np.asarray(beta_std, dtype=float).reshape(self.shape)
        P = softmax_last_reference(self.X @ B.T)
        return P[self._rows, self.actions] / self.mu

    def weights(self, policy: Policy) -> np.ndarray:
        P = policy.probabilities(self.dataset.transitions.states)
        return P[self._rows, self.actions] / self.mu

    def system_for_weights(self, w) -> BellmanSystem:
        return _system(self.phi, self.D, self.U, w, self.n, self.gamma)

    def theta_for_weights(self, w) -> np.ndarray:
        s = self.system_for_weights(w)
        return _ridge(s.A, s.b, self.lam)

    def value_std(self, beta_std) -> float:
        return float(self.nu @ self.theta_for_weights(self.weights_std(beta_std)))

    def value(self, policy: Policy) -> float:
        return float(self.nu @ self.theta_for_weights(self.weights(policy)))

    def model(self, policy: Policy) -> ValueModel:
        theta = self.theta_for_weights(self.weights(policy))
        return ValueModel(theta, self.feature_map, self.nu, self.gamma)


@dataclass(eq=False)
class PolicyFit:
    """Result of :func:`optimize_policy`."""

    policy: SoftmaxPolicy
    value: float
    theta: np.ndarray
    nu: np.ndarray
    objective: float
    beta_penalty: float
    theta_penalty: float
    evaluations: int
    sigma2: float | None = None
    n: int = 0
    n_transitions: int = 0
    trace: list = field(default_factory=list, repr=False)

    def __iter__(self):
        # unpacks as (policy, value)
        yield self.policy
        yield self.value


def anneal(fun, x0, rng: np.random.Generator, evals=1000, temperature=1.0, tmax=10, scale=1.0, bound=None):
    """Minimise ``fun`` by simulated annealing with a Gaussian Markov kernel.

    Temperature at outer step k is ``temperature / log(k + e - 1)``; each
    temperature is held for ``tmax`` proposals whose step size is
    proportional to it.  Returns the best point seen and its value.
    """
    x = np.array(x0, dtype=float)
    fx = fun(x)
    best_x, best_f = x.copy(), fx
    used, k = 1, 1
    while used < evals:
        t = temperature / math.log(k + math.e - 1.0)
        for _ in range(tmax):
            if used >= evals:
                break
            y = x + scale * t * rng.standard_normal(x.shape)
            if bound is not None:
                y = np.clip(y, -bound, bound)
            fy = fun(y)
            used += 1
            if np.isfinite(fy) and (fy <= fx or rng.random() < math.exp(-(fy - fx) / t)):
                x, fx = y, fy
                if fx < best_f:
                    best_x, best_f = x.copy(), fx
        k += 1
    return best_x, best_f


def central_gradient(fun, x, step):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * step)
    return g


def optimize_policy(
    dataset: Dataset,
    propensity: PropensityModel,
    feature_map: FeatureMap,
    gamma: float,
    search: SearchConfig | None = None,
    rng: np.random.Generator | None = None,
    evaluator: PolicyEvaluator | None = None,
    with_variance: bool = False,
) -> PolicyFit:
    """Maximise nu'theta_hat(beta) - lambda_beta ||beta||^2 over softmax policies."""
    search = search or SearchConfig()
    if rng is None:
        rng = np.random.default_rng(search.seed)
    ev = evaluator or PolicyEvaluator(dataset, propensity, feature_map, gamma, search.theta_penalty)
    lam_beta = default_beta_penalty(ev.N) if search.beta_penalty is None else search.beta_penalty
    calls = 0

    def loss(b):
        nonlocal calls
        calls += 1
        try:
            v = ev.value_std(b)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf
        out = -(v - lam_beta * float(b @ b))
        return out if np.isfinite(out) else np.inf

    x0 = np.zeros(ev.shape[0] * ev.shape[1])
    f0 = loss(x0)
    if search.anneal_evals > 1:
        xa, fa = anneal(
            loss,
            x0,
            rng,
            evals=search.anneal_evals,
            temperature=search.anneal_temperature,
            tmax=search.anneal_tmax,
            scale=search.anneal_scale,
            bound=search.bound,
        )
    else:
        xa, fa = x0, f0
    if not np.isfinite(fa):
        raise RuntimeError("policy objective is not finite at any probe")

    def big_loss(b):
        v = loss(b)
        return v if np.isfinite(v) else 1e100

    best_x, best_f = xa, fa
    if search.bfgs_maxiter > 0:
        res = optimize.minimize(
            big_loss,
            xa,
            jac=lambda b: central_gradient(big_loss, b, search.fd_step),
            method="BFGS",
            options={"gtol": search.bfgs_gtol, "maxiter": search.bfgs_maxiter},
        )
        if np.isfinite(res.fun) and res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
    policy = ev.to_policy(best_x)
    theta = ev.theta_for_weights(ev.weights_std(best_x))
    fit = PolicyFit(
        policy=policy,
        value=float(ev.nu @ theta),
        theta=theta,
        nu=ev.nu,
        objective=-best_f,
        beta_penalty=lam_beta,
        theta_penalty=ev.lam,
        evaluations=calls,
        n=ev.n,
        n_transitions=ev.N,
    )
    if with_variance:
        fit.sigma2 = variance_estimate(dataset, policy, theta, propensity, feature_map, gamma, ev.nu)
    return fit


def fit_value_model(
    dataset: Dataset,
    policy: Policy,
    propensity: PropensityModel,
    feature_map: FeatureMap,
    gamma: float,
    lambda_n: float | None = None,
    reference: str = "all_states",
) -> ValueModel:
    """Estimate theta for one fixed policy."""
    system = assemble_system(dataset, policy, propensity, feature_map, gamma)
    lam = default_theta_penalty(dataset.n) if lambda_n is None else lambda_n
    theta = solve_theta(system, lam)
    return ValueModel(theta, feature_map, reference_vector(dataset, feature_map, reference), gamma)
