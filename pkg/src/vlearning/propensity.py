"""Behavior-policy probabilities: known randomization, logged, or logistic fit."""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .policy import softmax_last_reference, with_intercept

log = logging.getLogger(__name__)

DEFAULT_FLOOR = 0.01
SEPARATION_BOUND = 30.0


class PropensityKind(str, enum.Enum):
    KNOWN = "known_constant"
    LOGISTIC = "logistic"
    LOGGED = "logged"


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """mu(a; s), floored at ``floor`` when evaluated.

    ``logged`` reads the generation probabilities stored with each
    transition; it is what online estimation uses.
    """

    kind: PropensityKind
    probs: np.ndarray | None = None
    coef: np.ndarray | None = None
    floor: float = DEFAULT_FLOOR
    history: tuple[float, ...] = field(default=(), repr=False)

    @classmethod
    def known(cls, probs, floor: float = DEFAULT_FLOOR) -> "PropensityModel":
        p = np.asarray(probs, dtype=float).reshape(-1)
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError(f"known propensities must form a distribution, got {p}")
        return cls(PropensityKind.KNOWN, probs=p, floor=floor)

    @classmethod
    def logged(cls, floor: float = DEFAULT_FLOOR) -> "PropensityModel":
        return cls(PropensityKind.LOGGED, floor=floor)

    @property
    def action_count(self) -> int:
        if self.kind is PropensityKind.KNOWN:
            return int(self.probs.size)
        if self.kind is PropensityKind.LOGISTIC:
            return int(self.coef.shape[0] + 1)
        raise AttributeError("logged propensities carry no action count")

    def probabilities(self, states) -> np.ndarray:
        """Unfloored (N, K) action probabilities."""
        if self.kind is PropensityKind.KNOWN:
            n = np.atleast_2d(states).shape[0]
            return np.broadcast_to(self.probs, (n, self.probs.size)).copy()
        if self.kind is PropensityKind.LOGISTIC:
            return softmax_last_reference(with_intercept(states) @ self.coef.T)
        raise ValueError("logged propensities are only defined on recorded transitions")

    def taken(self, states, actions, logged=None) -> np.ndarray:
        """Floored probability of each taken action."""
        if self.kind is PropensityKind.LOGGED:
            if logged is None:
                raise ValueError("dataset carries no logged propensities")
            p = np.asarray(logged, dtype=float)
        else:
            P = self.probabilities(states)
            p = P[np.arange(P.shape[0]), np.asarray(actions, dtype=int)]
        return np.maximum(p, self.floor)

    def for_dataset(self, dataset: Dataset) -> np.ndarray:
        tr = dataset.transitions
        return self.taken(tr.states, tr.actions, tr.propensities)


def propensity(model: PropensityModel, action: int, state) -> float:
    s = np.asarray(state, dtype=float).reshape(1, -1)
    if model.kind is PropensityKind.LOGGED:
        raise ValueError("logged propensities are only defined on recorded transitions")
    return float(model.taken(s, [action])[0])


def _loglik(coef, X, Y):
    logits = X @ coef.T
    Z = np.concatenate([logits, np.zeros((X.shape[0], 1))], axis=1)
    m = Z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(Z - m).sum(axis=1, keepdims=True))).ravel()
    return float((Z * Y).sum() - lse.sum())


def _newton_mnl(X, Y, ridge, tol, max_iter):
    """Multinomial logit MLE by damped Newton; Y is one-hot (N, K)."""
    N, d = X.shape
    K = Y.shape[1]
    m = K - 1
    coef = np.zeros((m, d))
    pen = lambda c: _loglik(c, X, Y) - 0.5 * ridge * float((c**2).sum())
    ll = pen(coef)
    history = [ll]
    converged = False
    for _ in range(max_iter):
        P = softmax_last_reference(X @ coef.T)[:, :m]
        G = ((Y[:, :m] - P).T @ X) - ridge * coef  # (m, d)
        gnorm = np.linalg.norm(G)
        if gnorm <= tol:
            converged = True
            break
        H = np.zeros((m * d, m * d))
        for j in range(m):
            for k in range(j, m):
                w = P[:, j] * ((j == k) - P[:, k])
                block = (X * w[:, None]).T @ X
                H[j * d:(j + 1) * d, k * d:(k + 1) * d] = block
                H[k * d:(k + 1) * d, j * d:(j + 1) * d] = block
        H += ridge * np.eye(m * d)
        try:
            step = np.linalg.solve(H, G.ravel()).reshape(m, d)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, G.ravel(), rcond=None)[0].reshape(m, d)
        t = 1.0
        while t > 1e-10:
            cand = coef + t * step
            ll_new = pen(cand)
            if ll_new >= ll:
                break
            t *= 0.5
        else:
            # no ascent possible at machine precision
            converged = gnorm <= 1e-6 * N
            break
        coef, ll = cand, ll_new
        history.append(ll_new)
        if np.abs(coef).max() > 1e3:
            return coef, history, False
    return coef, history, converged


def fit_logistic_propensity(
    dataset: Dataset,
    floor: float = DEFAULT_FLOOR,
    tol: float = 1e-8,
    max_iter: int = 100,
    ridge_fallback: float = 1e-4,
) -> PropensityModel:
    """Multinomial logistic regression of action on state (with intercept).

    States are standardized internally for conditioning and the coefficients
    mapped back to the raw scale.  If the unpenalized fit diverges (complete
    separation) a small ridge penalty is added.
    """
    tr = dataset.transitions
    K = dataset.action_count
    if np.unique(tr.actions).size < 2:
        raise ValueError("need at least two distinct observed actions to fit a propensity model")
    S = tr.states
    center = S.mean(axis=0)
    spread = S.std(axis=0)
    spread[spread == 0] = 1.0
    X = with_intercept((S - center) / spread)
    Y = np.eye(K)[tr.actions]
    coef, history, ok = _newton_mnl(X, Y, 0.0, tol, max_iter)
    # a vanishing gradient with huge standardized slopes is separation, not an optimum
    if not ok or np.abs(coef).max() > SEPARATION_BOUND:
        warnings.warn(
            f"logistic propensity fit did not converge (separation?); refitting with ridge {ridge_fallback}",
            RuntimeWarning,
            stacklevel=2,
        )
        coef, history, _ = _newton_mnl(X, Y, ridge_fallback, tol, max_iter)
    # back to raw-state coefficients
    slopes = coef[:, 1:] / spread
    intercept = coef[:, 0] - slopes @ center
    raw = np.hstack([intercept[:, None], slopes])
    return PropensityModel(PropensityKind.LOGISTIC, coef=raw, floor=floor, history=tuple(history))


def parse_propensity(text: str, floor: float = DEFAULT_FLOOR):
    """``known:<p1,...,pK>`` | ``logistic`` | ``logged`` -> model or the string 'logistic'."""
    text = text.strip()
    if text.startswith("known:"):
        return PropensityModel.known([float(v) for v in text[6:].split(",")], floor)
    if text == "logged":
        return PropensityModel.logged(floor)
    if text == "logistic":
        return "logistic"
    raise ValueError(f"unknown propensity spec {text!r}")
