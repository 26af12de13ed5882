"""Greedy gradient Q-learning baseline.

Q(s, a; eta) is linear in a main-effect block (1, s) plus one interaction
block (1, s) * 1{a = k} for every non-reference action k >= 1.  eta minimises
||D_n(eta)||^2 where

    D_n(eta) = (1/n) sum {U + gamma max_a Q(s', a) - Q(s, A)} x(s, A).

The objective is non-smooth in eta, so it is minimised with Nelder-Mead from
the gamma = 0 regression solution and several random restarts.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import Dataset
from .policy import GreedyPolicy, with_intercept

log = logging.getLogger(__name__)


def q_features(states, actions, action_count: int) -> np.ndarray:
    """Interaction design; one row per (state, action) pair, width K (p + 1)."""
    X = with_intercept(states)
    a = np.broadcast_to(np.asarray(actions, dtype=int), (X.shape[0],))
    if np.any(a < 0) or np.any(a >= action_count):
        raise ValueError("action out of range")
    d = X.shape[1]
    out = np.zeros((X.shape[0], action_count * d))
    out[:, :d] = X
    for k in range(1, action_count):
        m = a == k
        out[m, k * d:(k + 1) * d] = X[m]
    return out


@dataclass(frozen=True, eq=False)
class QModel:
    """Linear Q-function on min-max scaled states (lo = 0, hi = 1 means raw)."""

    eta: np.ndarray
    action_count: int
    lo: np.ndarray
    hi: np.ndarray

    def scale(self, states) -> np.ndarray:
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return (np.atleast_2d(np.asarray(states, dtype=float)) - self.lo) / span

    def q_values(self, states) -> np.ndarray:
        X = with_intercept(self.scale(states))
        E = self.eta.reshape(self.action_count, X.shape[1])
        base = X @ E[0]
        Q = X @ E.T
        Q[:, 0] = 0.0
        return Q + base[:, None]


def _design(dataset: Dataset, lo, hi):
    tr = dataset.transitions
    span = np.where(hi > lo, hi - lo, 1.0)
    S = (tr.states - lo) / span
    S1 = (tr.next_states - lo) / span
    K = dataset.action_count
    Xsa = q_features(S, tr.actions, K)
    X1 = with_intercept(S1)
    return Xsa, X1, tr.utilities


class _Residual:
    def __init__(self, Xsa, X1, U, K, gamma, n):
        self.Xsa, self.X1, self.U = Xsa, X1, U
        self.K, self.gamma, self.n = K, gamma, n
        self.d = X1.shape[1]

    def next_q(self, eta):
        E = eta.reshape(self.K, self.d)
        Q = self.X1 @ E.T
        Q[:, 1:] += Q[:, :1]
        return Q

    def __call__(self, eta):
        td = self.U + self.gamma * self.next_q(eta).max(axis=1) - self.Xsa @ eta
        return self.Xsa.T @ td / self.n

    def loss(self, eta):
        r = self(eta)
        return float(r @ r)

    def fixed_point_step(self, eta):
        """Solve D_n = 0 with the greedy next actions frozen at ``eta``'s."""
        a_star = self.next_q(eta).argmax(axis=1)
        X_star = q_features(self.X1[:, 1:], a_star, self.K)
        M = self.Xsa.T @ (self.Xsa - self.gamma * X_star)
        c = self.Xsa.T @ self.U
        return np.linalg.lstsq(M, c, rcond=None)[0]


def ggq_residual_vector(dataset: Dataset, eta, gamma: float, model: QModel | None = None) -> np.ndarray:
    """D_n(eta) on raw states, or on ``model``'s scaling when given."""
    p = dataset.state_dim
    lo = np.zeros(p) if model is None else model.lo
    hi = np.ones(p) if model is None else model.hi
    Xsa, X1, U = _design(dataset, lo, hi)
    return _Residual(Xsa, X1, U, dataset.action_count, gamma, dataset.n)(np.asarray(eta, dtype=float))


@dataclass(eq=False)
class GGQFit:
    model: QModel
    residual_norm: float
    warm_start_norm: float
    evaluations: int

    @property
    def eta(self) -> np.ndarray:
        return self.model.eta


def fit_ggq(
    dataset: Dataset,
    gamma: float,
    restarts: int = 5,
    rng: np.random.Generator | None = None,
    scale_states: bool = True,
    maxfev_per_dim: int = 400,
    polish: bool = False,
) -> GGQFit:
    """Minimise ||D_n(eta)||^2.

    ``polish`` additionally iterates the frozen-greedy linear solve from the
    best Nelder-Mead point, keeping it only when it lowers the residual.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    rng = rng or np.random.default_rng(0)
    p, K = dataset.state_dim, dataset.action_count
    if scale_states:
        S = dataset.observed_states
        lo, hi = S.min(axis=0), S.max(axis=0)
    else:
        lo, hi = np.zeros(p), np.ones(p)
    Xsa, X1, U = _design(dataset, lo, hi)
    res = _Residual(Xsa, X1, U, K, gamma, dataset.n)
    warm = np.linalg.lstsq(Xsa, U, rcond=None)[0]
    warm_loss = res.loss(warm)
    dim = warm.size
    spread = float(np.std(U)) + 1e-12
    starts = [warm] + [warm + spread * rng.standard_normal(dim) for _ in range(restarts - 1)]
    best, best_loss, evals = warm, warm_loss, 1
    for x0 in starts:
        out = optimize.minimize(
            res.loss,
            x0,
            method="Nelder-Mead",
            options={"maxfev": maxfev_per_dim * dim, "xatol": 1e-10, "fatol": 1e-16, "adaptive": True},
        )
        evals += out.nfev
        if out.fun < best_loss:
            best, best_loss = out.x, float(out.fun)
    if polish:
        x = best
        for _ in range(50):
            x = res.fixed_point_step(x)
            f = res.loss(x)
            evals += 1
            if f < best_loss:
                best, best_loss = x, f
            if f < 1e-24:
                break
    if best_loss >= warm_loss and gamma > 0:
        warnings.warn("GGQ search did not improve on the warm start", RuntimeWarning, stacklevel=2)
    return GGQFit(QModel(np.asarray(best), K, lo, hi), float(np.sqrt(best_loss)), float(np.sqrt(warm_loss)), evals)


def ggq_policy(fit_or_model, epsilon: float = 0.0) -> GreedyPolicy:
    """argmax_a Q(s, a) (lowest index on ties), optionally epsilon-greedy."""
    model = fit_or_model.model if isinstance(fit_or_model, GGQFit) else fit_or_model
    return GreedyPolicy(model, model.action_count, epsilon)
