import csv

import numpy as np
import pytest

from vlearning.online import OnlineConfig, VLearnEstimator, make_estimator, run_online, run_online_individualized
from vlearning.policy import ConstantPolicy, SoftmaxPolicy, uniform_policy
from vlearning.simenv import ToyEnv, make_env, rollout_value
from vlearning.vlearn import SearchConfig

FAST = SearchConfig(anneal_evals=40, bfgs_maxiter=5)


def _frozen(dataset, propensity, k, rng):
    return uniform_policy(2)


def _drift(dataset, propensity, k, rng):
    # a different, deterministic policy per update so replay can tell them apart
    return SoftmaxPolicy([[0.3 * k, -0.5, 0.25 * k]], 2)


def test_schedule():
    assert OnlineConfig(10, 36).update_times == (12, 18, 24, 30)
    assert OnlineConfig(10, 37).update_times == (12, 18, 24, 30, 36)
    assert OnlineConfig(10, 11).update_times == ()
    assert OnlineConfig(10, 36).ggq_epsilon(3) == 0.125


def test_config_validation():
    with pytest.raises(ValueError):
        OnlineConfig(0, 10)
    with pytest.raises(ValueError):
        OnlineConfig(5, 10, gamma=1.0)


def test_frozen_estimator_matches_plain_rollout():
    env = ToyEnv()
    res = run_online(env, OnlineConfig(30, 36, seed=7), estimator=_frozen)
    plain = rollout_value(env, uniform_policy(2), np.random.default_rng(7), n_eval=30, T_eval=36)
    assert float(res.utilities.mean()) == pytest.approx(plain, abs=1e-12)
    assert res.value == pytest.approx(float(res.utilities[:, 12:].mean()), abs=1e-15)


def test_short_horizon_has_no_updates():
    res = run_online(ToyEnv(), OnlineConfig(20, 10, seed=1))
    assert res.records == [] and len(res.snapshots) == 1
    plain = rollout_value(ToyEnv(), uniform_policy(2), np.random.default_rng(1), n_eval=20, T_eval=10)
    assert res.value == pytest.approx(plain, abs=1e-12)


@pytest.mark.property_suite
def test_propensity_replay():
    cfg = OnlineConfig(8, 30, seed=3)
    res = run_online(ToyEnv(), cfg, estimator=_drift)
    assert res.segments == [(0, 12), (12, 18), (18, 24), (24, 30)]
    assert len(res.snapshots) == 4
    for (start, stop), pol in zip(res.segments, res.snapshots):
        for i, tr in enumerate(res.dataset.trajectories):
            P = pol.probabilities(tr.states[start:stop])
            np.testing.assert_allclose(tr.propensities[start:stop], P[np.arange(stop - start), tr.actions[start:stop]])


@pytest.mark.property_suite
def test_refits_see_accumulated_data():
    seen = []

    def spy(dataset, propensity, k, rng):
        seen.append((k, dataset.n_transitions))
        return uniform_policy(2)

    run_online(ToyEnv(), OnlineConfig(5, 30), estimator=spy)
    assert seen == [(1, 60), (2, 90), (3, 120)]


def test_failure_keeps_previous_policy():
    def flaky(dataset, propensity, k, rng):
        if k == 2:
            raise RuntimeError("boom")
        return _drift(dataset, propensity, k, rng)

    res = run_online(ToyEnv(), OnlineConfig(5, 30, seed=2), estimator=flaky)
    assert [r.failures for r in res.records] == [0, 1, 0]
    assert res.snapshots[2] is res.snapshots[1]


def test_write_log(tmp_path):
    res = run_online(ToyEnv(), OnlineConfig(5, 24, seed=2), estimator=_drift)
    res.write_log(tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert [r["t"] for r in rows] == ["12", "18"]
    assert rows[0]["estimator"] == "_drift" and rows[1]["snapshot"] == "u2"


@pytest.mark.property_suite
def test_seed_determinism():
    cfg = OnlineConfig(6, 24, estimator="linear", search=FAST, seed=4)
    a, b = run_online(ToyEnv(), cfg), run_online(ToyEnv(), cfg)
    np.testing.assert_array_equal(a.utilities, b.utilities)


def test_make_estimator():
    assert make_estimator(OnlineConfig(5, 20, estimator="ggq")).name == "ggq"
    assert make_estimator(OnlineConfig(5, 20)).name == "vl-gaussian_rbf"


def test_ggq_online_runs():
    res = run_online(ToyEnv(), OnlineConfig(6, 20, estimator="ggq", ggq_restarts=1, seed=5))
    assert np.isfinite(res.value)
    assert res.snapshots[1].epsilon == 0.5


class _FirstFitOnly:
    """Returns its first fit forever; the universal counterpart of eps_k = 1."""

    def __init__(self, inner):
        self.inner, self.first = inner, None

    def __call__(self, dataset, propensity, k, rng):
        fit = self.inner(dataset, propensity, k, rng)
        if self.first is None:
            self.first = fit
        return self.first


def test_mixing_one_follows_pooled_policy():
    env = make_env("toy_hetero")
    cfg = OnlineConfig(4, 30, mixing_base=1.0, seed=6)
    ind = run_online_individualized(env, cfg, estimator=_drift)
    uni = run_online(env, cfg, estimator=_FirstFitOnly(_drift))
    np.testing.assert_array_equal(ind.utilities, uni.utilities)


def test_single_patient_individualized_is_universal():
    env = make_env("toy_hetero")
    cfg = OnlineConfig(1, 30, estimator="linear", mixing_base=0.0, search=FAST, seed=8)
    ind = run_online_individualized(env, cfg)
    uni = run_online(env, cfg)
    np.testing.assert_array_equal(ind.utilities, uni.utilities)


def test_individualized_patient_failure_falls_back():
    calls = []

    def picky(dataset, propensity, k, rng):
        calls.append(dataset.n)
        if dataset.n == 1 and len(calls) % 2 == 0:
            raise RuntimeError("too little data")
        return ConstantPolicy([0.9, 0.1])

    res = run_online_individualized(make_env("toy_hetero"), OnlineConfig(4, 24, seed=9), estimator=picky)
    assert res.records[1].failures == 2
    pooled = res.snapshots[1]
    per_patient = res.snapshots[2].policies
    assert sum(p is pooled for p in per_patient) == 2


def test_individualized_smoke():
    est = VLearnEstimator("linear", 0.9, FAST)
    res = run_online_individualized(make_env("toy_hetero"), OnlineConfig(3, 24, seed=10), estimator=est)
    assert np.isfinite(res.value)
    assert len(res.snapshots[2].policies) == 3
