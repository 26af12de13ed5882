"""Randomized decision rules over a finite action set.

Every policy exposes ``probabilities(states) -> (N, K)`` so estimation,
rollouts and online loops can treat them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np


class Policy(Protocol):
    action_count: int

    def probabilities(self, states) -> np.ndarray: ...


def with_intercept(states) -> np.ndarray:
    X = np.atleast_2d(np.asarray(states, dtype=float))
    return np.hstack([np.ones((X.shape[0], 1)), X])


def softmax_last_reference(logits: np.ndarray) -> np.ndarray:
    """Probabilities from (N, K-1) logits; the last action has logit 0."""
    Z = np.concatenate([logits, np.zeros(logits.shape[:-1] + (1,))], axis=-1)
    Z = Z - Z.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """pi(a_j; s) = exp(x'beta_j) / (1 + sum_k exp(x'beta_k)) for j < K-1.

    ``x`` is the state with a leading 1; the last action is the reference
    with probability 1 / (1 + sum_k exp(x'beta_k)).
    """

    beta: np.ndarray
    action_count: int

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        K = self.action_count
        if K < 2:
            raise ValueError("softmax policy needs at least two actions")
        beta = beta.reshape(K - 1, -1)
        if not np.all(np.isfinite(beta)):
            raise ValueError("policy coefficients must be finite")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def zeros(cls, action_count: int, state_dim: int) -> "SoftmaxPolicy":
        return cls(np.zeros((action_count - 1, state_dim + 1)), action_count)

    @property
    def feature_dim(self) -> int:
        return int(self.beta.shape[1])

    def logits(self, states) -> np.ndarray:
        X = with_intercept(states)
        if X.shape[1] != self.feature_dim:
            raise ValueError(f"state dimension {X.shape[1] - 1} does not match policy ({self.feature_dim - 1})")
        return X @ self.beta.T

    def probabilities(self, states) -> np.ndarray:
        P = softmax_last_reference(self.logits(states))
        return P[0] if np.ndim(states) == 1 else P

    def to_text(self) -> str:
        K, d = self.action_count, self.feature_dim
        return ",".join([str(K), str(d), *(repr(float(b)) for b in self.beta.ravel())])

    @classmethod
    def from_text(cls, text: str) -> "SoftmaxPolicy":
        parts = [p for p in text.replace("\n", ",").split(",") if p.strip()]
        K, d = int(parts[0]), int(parts[1])
        vals = np.array([float(v) for v in parts[2:]])
        if vals.size != (K - 1) * d:
            raise ValueError(f"expected {(K - 1) * d} coefficients, got {vals.size}")
        return cls(vals.reshape(K - 1, d), K)


@dataclass(frozen=True, eq=False)
class ConstantPolicy:
    """State-independent action distribution (e.g. a micro-randomized design)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).reshape(-1)
        if p.size < 2 or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError(f"invalid action distribution {p}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def action_count(self) -> int:
        return int(self.probs.size)

    def probabilities(self, states) -> np.ndarray:
        if np.ndim(states) == 1:
            return self.probs.copy()
        return np.broadcast_to(self.probs, (np.shape(states)[0], self.action_count)).copy()


def uniform_policy(action_count: int) -> ConstantPolicy:
    return ConstantPolicy(np.full(action_count, 1.0 / action_count))


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """(1 - epsilon) * main + epsilon * fallback."""

    main: Policy
    fallback: Policy
    epsilon: float

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.main.action_count != self.fallback.action_count:
            raise ValueError("mixture components disagree on action count")

    @property
    def action_count(self) -> int:
        return self.main.action_count

    def probabilities(self, states) -> np.ndarray:
        if self.epsilon == 0.0:
            return self.main.probabilities(states)
        if self.epsilon == 1.0:
            return self.fallback.probabilities(states)
        return (1.0 - self.epsilon) * self.main.probabilities(states) + self.epsilon * self.fallback.probabilities(
            states
        )


def epsilon_greedy(greedy_action, action_count: int, epsilon: float) -> np.ndarray:
    """Greedy action with probability 1 - eps, others eps / (K - 1) each.

    ``greedy_action`` may be an int or an integer array, giving (K,) or (N, K).
    """
    if action_count < 2:
        raise ValueError("epsilon-greedy needs at least two actions")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    g = np.asarray(greedy_action, dtype=int)
    out = np.full(g.shape + (action_count,), epsilon / (action_count - 1))
    np.put_along_axis(out, g[..., None], 1.0 - epsilon, axis=-1)
    return out


@dataclass(frozen=True, eq=False)
class GreedyPolicy:
    """Epsilon-greedy wrapper around ``argmax_a scores(s)[a]``.

    ``scorer`` is any object with ``q_values(states) -> (N, K)``; ties go to
    the lowest action index.
    """

    scorer: object
    action_count: int
    epsilon: float = 0.0

    def greedy_actions(self, states) -> np.ndarray:
        Q = self.scorer.q_values(np.atleast_2d(states))
        return np.argmax(Q, axis=1)

    def probabilities(self, states) -> np.ndarray:
        P = epsilon_greedy(self.greedy_actions(states), self.action_count, self.epsilon)
        return P[0] if np.ndim(states) == 1 else P


def sample_actions(policy: Policy, states, rng: np.random.Generator) -> np.ndarray:
    """One action per row of ``states`` by inverse-CDF sampling."""
    P = np.atleast_2d(policy.probabilities(np.atleast_2d(states)))
    C = np.cumsum(P, axis=1)
    u = rng.random(P.shape[0])[:, None] * C[:, -1:]
    a = (u >= C).sum(axis=1)
    return np.minimum(a, P.shape[1] - 1)


def sample_action(policy: Policy, state, rng: np.random.Generator) -> int:
    return int(sample_actions(policy, np.asarray(state, dtype=float).reshape(1, -1), rng)[0])


@dataclass(frozen=True, eq=False)
class PatientPolicies:
    """Row i of every state batch belongs to patient i, who follows ``policies[i]``."""

    policies: tuple

    @property
    def action_count(self) -> int:
        return self.policies[0].action_count

    def probabilities(self, states) -> np.ndarray:
        S = np.atleast_2d(np.asarray(states, dtype=float))
        if S.shape[0] != len(self.policies):
            raise ValueError(f"{S.shape[0]} state rows for {len(self.policies)} patients")
        return np.vstack([np.atleast_2d(p.probabilities(S[i : i + 1])) for i, p in enumerate(self.policies)])
