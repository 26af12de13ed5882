"""Feature maps for the linear working model of the state-value function."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

RBF_CENTERS = (0.0, 0.25, 0.5, 0.75, 1.0)
RBF_WIDTH = 0.25


class BasisKind(str, enum.Enum):
    LINEAR = "linear"
    POLYNOMIAL2 = "polynomial2"
    GAUSSIAN_RBF = "gaussian_rbf"
    TABULAR = "tabular"


_ALIASES = {
    "linear": BasisKind.LINEAR,
    "poly": BasisKind.POLYNOMIAL2,
    "polynomial": BasisKind.POLYNOMIAL2,
    "polynomial2": BasisKind.POLYNOMIAL2,
    "gaussian": BasisKind.GAUSSIAN_RBF,
    "gaussian_rbf": BasisKind.GAUSSIAN_RBF,
    "rbf": BasisKind.GAUSSIAN_RBF,
    "tabular": BasisKind.TABULAR,
}


def basis_kind(name) -> BasisKind:
    if isinstance(name, BasisKind):
        return name
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown basis {name!r}; expected one of {sorted(_ALIASES)}") from None


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """State -> feature vector with a leading intercept.

    ``lo``/``hi`` are the per-component min-max scaling fitted on training
    states.  Only the Gaussian basis clamps scaled values to [0, 1].  For the
    tabular kind ``table`` lists the distinct states; the first one is the
    reference level and gets no indicator of its own.
    """

    kind: BasisKind
    lo: np.ndarray
    hi: np.ndarray
    table: np.ndarray | None = None
    centers: tuple[float, ...] = RBF_CENTERS
    width: float = RBF_WIDTH

    @property
    def state_dim(self) -> int:
        return int(self.lo.shape[0])

    @property
    def dim(self) -> int:
        p = self.state_dim
        if self.kind is BasisKind.LINEAR:
            return 1 + p
        if self.kind is BasisKind.POLYNOMIAL2:
            return 1 + 2 * p + p * (p - 1) // 2
        if self.kind is BasisKind.GAUSSIAN_RBF:
            return 1 + p * len(self.centers)
        return int(self.table.shape[0])

    def scale(self, states: np.ndarray) -> np.ndarray:
        span = self.hi - self.lo
        flat = span == 0
        out = (states - self.lo) / np.where(flat, 1.0, span)
        if flat.any():
            out[..., flat] = 0.5
        return out

    def transform(self, states) -> np.ndarray:
        """Features for a batch of states, shape (N, q)."""
        X = np.asarray(states, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.state_dim:
            raise ValueError(f"state dimension {X.shape[1]} does not match fitted dimension {self.state_dim}")
        N = X.shape[0]
        if self.kind is BasisKind.TABULAR:
            F = np.zeros((N, self.dim))
            F[:, 0] = 1.0
            match = np.all(X[:, None, :] == self.table[None, :, :], axis=2)
            found = match.any(axis=1)
            if not found.all():
                raise ValueError(f"state {X[~found][0]} not in tabular basis")
            idx = match.argmax(axis=1)
            rows = np.flatnonzero(idx > 0)
            F[rows, idx[rows]] = 1.0
        else:
            Z = self.scale(X)
            ones = np.ones((N, 1))
            if self.kind is BasisKind.LINEAR:
                F = np.hstack([ones, Z])
            elif self.kind is BasisKind.POLYNOMIAL2:
                i, j = np.triu_indices(self.state_dim, k=1)
                F = np.hstack([ones, Z, Z**2, Z[:, i] * Z[:, j]])
            else:
                Z = np.clip(Z, 0.0, 1.0)
                c = np.asarray(self.centers)
                G = np.exp(-((Z[:, :, None] - c) ** 2) / (2.0 * self.width**2))
                F = np.hstack([ones, G.reshape(N, -1)])
        return F[0] if single else F


def features(fmap: FeatureMap, state) -> np.ndarray:
    return fmap.transform(np.asarray(state, dtype=float).reshape(-1))


def identity_map(kind, state_dim: int) -> FeatureMap:
    """Feature map with no rescaling (lo = 0, hi = 1)."""
    return FeatureMap(basis_kind(kind), np.zeros(state_dim), np.ones(state_dim))


def fit_feature_map(kind, data, max_table_states: int = 64) -> FeatureMap:
    """Fit scaling (and the state table for ``tabular``) on observed states.

    ``data`` is a :class:`~vlearning.data.Dataset` or a 2-d array of states.
    """
    kind = basis_kind(kind)
    states = getattr(data, "observed_states", data)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.size == 0:
        raise ValueError("cannot fit a feature map on no states")
    lo, hi = states.min(axis=0), states.max(axis=0)
    if kind is not BasisKind.TABULAR and np.any(lo == hi):
        bad = np.flatnonzero(lo == hi).tolist()
        warnings.warn(f"constant state components {bad} map to 0.5", RuntimeWarning, stacklevel=2)
    table = None
    if kind is BasisKind.TABULAR:
        table = np.unique(states, axis=0)
        if table.shape[0] > max_table_states:
            raise ValueError(
                f"tabular basis needs a small discrete state space; found {table.shape[0]} distinct states"
            )
    return FeatureMap(kind, lo, hi, table)
