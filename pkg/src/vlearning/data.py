"""Trajectory data model, CSV ingestion and utility computation."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed trajectory data."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One patient's ragged sequence of states, actions and utilities.

    ``states`` has one more row than ``actions``; the last row is the state
    reached after the final action.  ``propensities`` optionally records the
    probability with which the generating policy chose each logged action.
    """

    patient_id: str
    states: np.ndarray
    actions: np.ndarray
    utilities: np.ndarray
    followup: np.ndarray | None = None
    propensities: np.ndarray | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2:
            raise DataError(f"patient {self.patient_id}: states must be 2-d")
        actions = np.asarray(self.actions, dtype=int).reshape(-1)
        utilities = np.asarray(self.utilities, dtype=float).reshape(-1)
        T = actions.shape[0]
        if states.shape[0] != T + 1 or utilities.shape[0] != T:
            raise DataError(
                f"patient {self.patient_id}: need |states| = |actions| + 1 = |utilities| + 1, "
                f"got {states.shape[0]}, {T}, {utilities.shape[0]}"
            )
        if self.followup is None:
            followup = np.ones(T + 1, dtype=bool)
        else:
            followup = np.asarray(self.followup, dtype=bool).reshape(-1)
            if followup.shape[0] != T + 1:
                raise DataError(f"patient {self.patient_id}: followup must have length {T + 1}")
            lost = np.flatnonzero(~followup)
            if lost.size and followup[lost[0]:].any():
                raise DataError(f"patient {self.patient_id}: followup resumes after loss")
        props = self.propensities
        if props is not None:
            props = np.asarray(props, dtype=float).reshape(-1)
            if props.shape[0] != T:
                raise DataError(f"patient {self.patient_id}: propensities must have length {T}")
        for name, value in (
            ("states", states),
            ("actions", actions),
            ("utilities", utilities),
            ("followup", followup),
            ("propensities", props),
        ):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[0])

    @property
    def active(self) -> np.ndarray:
        """Mask of transitions whose next state is still in follow-up.

        Follow-up is monotone, so the starting state is observed too.
        """
        return self.followup[1:]


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    action_count: int
    state_dim: int = field(default=-1)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if not trajs:
            raise DataError("dataset has no trajectories")
        dims = {t.states.shape[1] for t in trajs}
        if len(dims) != 1:
            raise DataError(f"ragged state dimension across patients: {sorted(dims)}")
        p = dims.pop()
        if self.state_dim not in (-1, p):
            raise DataError(f"state_dim {self.state_dim} does not match data ({p})")
        object.__setattr__(self, "state_dim", p)
        if self.action_count < 1:
            raise DataError("action_count must be positive")
        for t in trajs:
            if t.actions.size and (t.actions.min() < 0 or t.actions.max() >= self.action_count):
                raise DataError(f"patient {t.patient_id}: action out of range [0, {self.action_count})")
        if sum(int(t.active.sum()) for t in trajs) == 0:
            raise DataError("dataset has no transitions")

    @property
    def n(self) -> int:
        """Number of patients."""
        return len(self.trajectories)

    @cached_property
    def transitions(self) -> "Transitions":
        return Transitions.from_trajectories(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return self.transitions.size

    @cached_property
    def observed_states(self) -> np.ndarray:
        """Every state row recorded while in follow-up."""
        return np.concatenate([t.states[t.followup] for t in self.trajectories])

    @cached_property
    def initial_states(self) -> np.ndarray:
        return np.stack([t.states[0] for t in self.trajectories])

    @property
    def has_propensities(self) -> bool:
        return all(t.propensities is not None for t in self.trajectories)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.trajectories[i] for i in indices), self.action_count, self.state_dim)


@dataclass(frozen=True, eq=False)
class Transitions:
    """Stacked view of all in-follow-up transitions, in patient then time order."""

    states: np.ndarray
    actions: np.ndarray
    utilities: np.ndarray
    next_states: np.ndarray
    patient: np.ndarray
    propensities: np.ndarray | None

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "Transitions":
        S, A, U, S1, pid, mu = [], [], [], [], [], []
        has_mu = all(t.propensities is not None for t in trajectories)
        for i, t in enumerate(trajectories):
            m = t.active
            S.append(t.states[:-1][m])
            S1.append(t.states[1:][m])
            A.append(t.actions[m])
            U.append(t.utilities[m])
            pid.append(np.full(int(m.sum()), i))
            if has_mu:
                mu.append(t.propensities[m])
        return cls(
            states=np.concatenate(S),
            actions=np.concatenate(A),
            utilities=np.concatenate(U),
            next_states=np.concatenate(S1),
            patient=np.concatenate(pid),
            propensities=np.concatenate(mu) if has_mu else None,
        )

    @property
    def size(self) -> int:
        return int(self.actions.shape[0])


# ---------------------------------------------------------------------------
# utilities


class UtilityKind(str, enum.Enum):
    SIMPLE_TOY = "simple_toy"
    GLYCEMIC = "glycemic"
    CUSTOM_COLUMN = "custom-column"


# Upper edges of the glycemic bands (inclusive) and their weights; above the
# last edge the weight is HYPER_WEIGHT.
GLYCEMIC_EDGES = (70.0, 80.0, 120.0, 150.0)
GLYCEMIC_WEIGHTS = (-3, -1, 0, -1)
HYPER_WEIGHT = -2


def glycemic_weight(glucose):
    """Clinical penalty for an interval with average glucose ``glucose`` (mg/dL).

    -3 at or below 70, -1 on (70, 80], 0 on (80, 120], -1 on (120, 150] and -2
    above 150.  Accepts scalars or arrays.
    """
    g = np.asarray(glucose, dtype=float)
    idx = np.searchsorted(GLYCEMIC_EDGES, g, side="left")
    table = np.array(GLYCEMIC_WEIGHTS + (HYPER_WEIGHT,))
    out = table[idx]
    return int(out) if out.ndim == 0 else out


def toy_utility(next_state, action, state=None):
    """2 S1' + S2' - (2A - 1)/4, vectorised over leading axes."""
    s1 = np.asarray(next_state, dtype=float)
    a = np.asarray(action, dtype=float)
    out = 2.0 * s1[..., 0] + s1[..., 1] - 0.25 * (2.0 * a - 1.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class UtilitySpec:
    kind: UtilityKind = UtilityKind.CUSTOM_COLUMN
    glucose_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", UtilityKind(self.kind))

    def evaluate(self, next_states, actions, states) -> np.ndarray:
        next_states = np.asarray(next_states, dtype=float)
        states = np.asarray(states, dtype=float)
        if self.kind is UtilityKind.SIMPLE_TOY:
            if next_states.shape[-1] < 2:
                raise DataError("simple_toy utility needs two state components")
            return np.asarray(toy_utility(next_states, actions), dtype=float)
        if self.kind is UtilityKind.GLYCEMIC:
            g = self.glucose_index
            if g >= next_states.shape[-1]:
                raise DataError(f"glucose index {g} out of range for state dimension {next_states.shape[-1]}")
            return (glycemic_weight(states[..., g]) + glycemic_weight(next_states[..., g])).astype(float)
        raise DataError("custom-column utilities are read from data, not computed")


def compute_utilities(dataset: Dataset, spec: UtilitySpec) -> Dataset:
    """Return a copy of ``dataset`` with utilities recomputed from the states.

    Utilities of transitions that start after loss to follow-up are zero.
    ``custom-column`` keeps the stored utilities (still zeroing after loss).
    """
    if spec.kind is UtilityKind.GLYCEMIC and spec.glucose_index >= dataset.state_dim:
        raise DataError(
            f"glucose index {spec.glucose_index} out of range for state dimension {dataset.state_dim}"
        )
    out = []
    for t in dataset.trajectories:
        if spec.kind is UtilityKind.CUSTOM_COLUMN:
            u = np.array(t.utilities, dtype=float)
        else:
            u = np.array(spec.evaluate(t.states[1:], t.actions, t.states[:-1]), dtype=float)
        u[~t.active] = 0.0
        out.append(Trajectory(t.patient_id, t.states, t.actions, u, t.followup, t.propensities))
    return Dataset(tuple(out), dataset.action_count, dataset.state_dim)


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for trajectory CSV files.

    ``state_columns=None`` takes every column named ``s_<k>`` in numeric order.
    Optional columns (utility, followup, propensity) are used when present.
    """

    patient: str = "patient_id"
    time: str = "t"
    state_columns: tuple[str, ...] | None = None
    action: str = "action"
    utility: str = "utility"
    followup: str = "followup"
    propensity: str = "propensity"


def _state_columns(header: Sequence[str], schema: CsvSchema) -> list[str]:
    if schema.state_columns is not None:
        return list(schema.state_columns)
    cols = [c for c in header if c.startswith("s_") and c[2:].isdigit()]
    return sorted(cols, key=lambda c: int(c[2:]))


def _parse_bool(text: str, row: int) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "t", "yes"):
        return True
    if v in ("0", "false", "f", "no"):
        return False
    raise DataError(f"row {row}: cannot parse followup value {text!r}")


def load_dataset(
    path: str | Path,
    schema: CsvSchema = CsvSchema(),
    action_count: int | None = None,
) -> Dataset:
    """Read a trajectory CSV (one row per patient and time, sorted).

    Row numbers in error messages count the header as row 1.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        scols = _state_columns(header, schema)
        if not scols:
            raise DataError("missing column: no state columns (s_1..s_p)")
        for col in (schema.patient, schema.time, schema.action, *scols):
            if col not in header:
                raise DataError(f"missing column: {col}")
        has_u = schema.utility in header
        has_l = schema.followup in header
        has_mu = schema.propensity in header

        groups: dict[str, list[tuple[int, dict]]] = {}
        order: list[str] = []
        for rownum, rec in enumerate(reader, start=2):
            if None in rec.values() or None in rec:
                raise DataError(f"row {rownum}: ragged row, expected {len(header)} fields")
            pid = rec[schema.patient]
            if pid not in groups:
                groups[pid] = []
                order.append(pid)
            elif order[-1] != pid:
                raise DataError(f"row {rownum}: rows for patient {pid} are not contiguous")
            groups[pid].append((rownum, rec))

    trajs = []
    max_action = -1
    for pid in order:
        rows = groups[pid]
        states, actions, utils, follow, mus = [], [], [], [], []
        prev_t = None
        for k, (rownum, rec) in enumerate(rows):
            try:
                t = int(rec[schema.time])
            except ValueError:
                raise DataError(f"row {rownum}: bad time index {rec[schema.time]!r}") from None
            if prev_t is not None and t != prev_t + 1:
                raise DataError(f"row {rownum}: non-contiguous time index for patient {pid} ({prev_t} -> {t})")
            prev_t = t
            try:
                states.append([float(rec[c]) for c in scols])
            except ValueError:
                raise DataError(f"row {rownum}: non-numeric state value") from None
            if has_l:
                follow.append(_parse_bool(rec[schema.followup], rownum))
            last = k == len(rows) - 1
            a_text = rec[schema.action].strip()
            if last:
                continue
            if not a_text:
                raise DataError(f"row {rownum}: missing action")
            try:
                a = int(float(a_text))
            except ValueError:
                raise DataError(f"row {rownum}: bad action {a_text!r}") from None
            if a < 0 or (action_count is not None and a >= action_count):
                raise DataError(f"row {rownum}: action out of range ({a})")
            max_action = max(max_action, a)
            actions.append(a)
            if has_u:
                u_text = rec[schema.utility].strip()
                utils.append(float(u_text) if u_text else 0.0)
            else:
                utils.append(0.0)
            if has_mu:
                mus.append(float(rec[schema.propensity]))
        if len(states) < 2:
            raise DataError(f"patient {pid}: needs at least two time points")
        trajs.append(
            Trajectory(
                pid,
                np.array(states),
                np.array(actions, dtype=int),
                np.array(utils),
                np.array(follow) if has_l else None,
                np.array(mus) if has_mu else None,
            )
        )
    if not trajs:
        raise DataError("dataset has no trajectories")
    K = action_count if action_count is not None else max(2, max_action + 1)
    return Dataset(tuple(trajs), K)


def write_dataset(dataset: Dataset, path: str | Path, include_propensity: bool | None = None) -> None:
    p = dataset.state_dim
    if include_propensity is None:
        include_propensity = dataset.has_propensities
    header = ["patient_id", "t", *[f"s_{k + 1}" for k in range(p)], "action", "utility", "followup"]
    if include_propensity:
        header.append("propensity")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for traj in dataset.trajectories:
            for t in range(traj.horizon + 1):
                row = [traj.patient_id, t + 1, *[repr(float(x)) for x in traj.states[t]]]
                if t < traj.horizon:
                    row += [int(traj.actions[t]), repr(float(traj.utilities[t]))]
                else:
                    row += ["", ""]
                row.append(int(traj.followup[t]))
                if include_propensity:
                    row.append(repr(float(traj.propensities[t])) if t < traj.horizon else "")
                w.writerow(row)
