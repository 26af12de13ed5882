import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlearning.data import glycemic_weight, toy_utility
from vlearning.policy import ConstantPolicy, uniform_policy
from vlearning.simenv import (
    FiniteMDP,
    SimState,
    T1DEnv,
    ToyEnv,
    burn_in,
    generate_offline,
    make_env,
    rollout_value,
    t1d_step,
    toy_step,
)

QUIET_T1D = dict(sigma=0.0, p_food=0.0, p_mild=0.0, p_moderate=0.0)


def test_toy_step_hand_example():
    np.testing.assert_allclose(toy_step(np.array([1.0, 1.0]), 1, noise_sd=0.0), [1.0, -0.5])
    np.testing.assert_allclose(toy_step(np.array([1.0, 1.0]), 0, noise_sd=0.0), [-0.5, 1.0])


def test_toy_zero_state_is_pure_noise():
    rng = np.random.default_rng(0)
    nxt = toy_step(np.zeros((20_000, 2)), np.ones(20_000, int), rng)
    assert np.all(np.abs(nxt.mean(axis=0)) < 0.02)
    np.testing.assert_allclose(nxt.std(axis=0), 0.5, atol=0.01)


def test_toy_treatment_sign_structure():
    s = np.array([1.0, 1.0])
    treated, untreated = toy_step(s, 1, noise_sd=0.0), toy_step(s, 0, noise_sd=0.0)
    assert treated[0] > untreated[0]
    assert abs(treated[1]) < abs(untreated[1])


def test_toy_env_utility_matches_formula():
    env = ToyEnv()
    rng = np.random.default_rng(1)
    sim = env.reset(50, rng)
    a = rng.integers(0, 2, 50)
    nxt, u = env.step(sim, a, rng)
    np.testing.assert_allclose(u, toy_utility(nxt.obs, a))


def test_toy_state_bound():
    env = ToyEnv()
    sim = SimState(np.full((3, 2), 9.0), {"coef": np.full(3, 0.75)})
    nxt, _ = env.step(sim, np.zeros(3, int), np.random.default_rng(0))
    assert np.all(np.abs(nxt.obs) <= 10.0)


def test_heterogeneous_coefficients():
    sim = make_env("toy_hetero").reset(5000, np.random.default_rng(2))
    c = sim.hidden["coef"]
    assert c.min() >= 0.4 and c.max() <= 0.9
    assert np.mean(c) == pytest.approx(0.65, abs=0.01)


def test_t1d_stationary_mean():
    out, _ = t1d_step(np.r_[100.0, 100.0, np.zeros(6)], 0, np.random.default_rng(0), T1DEnv(**QUIET_T1D))
    assert out[0, 0] == pytest.approx(100.0, abs=1e-12)


def test_t1d_insulin_lags():
    env = T1DEnv(**QUIET_T1D)
    h = np.r_[100.0, 100.0, np.zeros(6)]
    now, _ = t1d_step(h, 1, np.random.default_rng(0), env)
    before, _ = t1d_step(h, 0, np.random.default_rng(0), env, insulin_prev=1.0)
    assert now[0, 0] == pytest.approx(98.0, abs=1e-12)
    assert before[0, 0] == pytest.approx(96.0, abs=1e-12)


def test_t1d_state_shift():
    env = T1DEnv(**QUIET_T1D)
    h = np.arange(1.0, 9.0)
    out, _ = t1d_step(h, 0, np.random.default_rng(0), env)
    np.testing.assert_array_equal(out[0, 1:], [h[0], 0.0, h[2], 0.0, h[4], h[5], h[6]])


@pytest.mark.property_suite
def test_t1d_utility_is_sum_of_weights():
    env = T1DEnv()
    rng = np.random.default_rng(3)
    sim = burn_in(env, 200, rng, 5)
    nxt, u = env.step(sim, rng.integers(0, 2, 200), rng)
    np.testing.assert_array_equal(u, glycemic_weight(sim.obs[:, 0]) + glycemic_weight(nxt.obs[:, 0]))
    assert np.all((u >= -6) & (u <= 0))


def test_t1d_glucose_variance_stabilises():
    env = T1DEnv()
    rng = np.random.default_rng(4)
    sim = env.reset(2000, rng)
    var = []
    for t in range(300):
        sim, _ = env.step(sim, (rng.random(2000) < 0.3).astype(int), rng)
        if t in (99, 199, 299):
            var.append(sim.obs[:, 0].var())
    assert max(var) / min(var) < 1.15


def test_t1d_alpha_guard():
    with pytest.raises(ValueError):
        T1DEnv(alpha=(1.0, 0, 0, 0, 0, 0, 0))


def test_t1d_multi_action_layout():
    env = make_env("t1d_multi")
    assert env.action_count == 8
    p = env.behavior_policy().probs
    assert p.sum() == pytest.approx(1.0)
    ins, food, act = env.decode(np.arange(8))
    np.testing.assert_array_equal(ins, [0, 0, 0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(food, [0, 0, 1, 1, 0, 0, 1, 1])
    np.testing.assert_array_equal(act, [0, 1, 0, 1, 0, 1, 0, 1])


def test_unknown_env():
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("mars")


def test_generate_offline_shape():
    ds = generate_offline(ToyEnv(), 25, 24, np.random.default_rng(0))
    assert ds.n == 25 and ds.n_transitions == 25 * 24
    one = generate_offline(ToyEnv(), 3, 1, np.random.default_rng(0), burn_in_steps=0)
    assert all(t.horizon == 1 for t in one.trajectories)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["toy", "toy_hetero", "t1d", "t1d_multi"]))
@pytest.mark.property_suite
def test_seeded_determinism(seed, name):
    env = make_env(name)
    a = generate_offline(env, 3, 4, np.random.default_rng(seed), burn_in_steps=3)
    b = generate_offline(env, 3, 4, np.random.default_rng(seed), burn_in_steps=3)
    for x, y in zip(a.trajectories, b.trajectories):
        np.testing.assert_array_equal(x.states, y.states)
        np.testing.assert_array_equal(x.actions, y.actions)
        np.testing.assert_array_equal(x.utilities, y.utilities)
    pol = uniform_policy(env.action_count)
    assert rollout_value(env, pol, np.random.default_rng(seed), 3, 4, 2) == rollout_value(
        env, pol, np.random.default_rng(seed), 3, 4, 2
    )


def test_constant_utility_rollout():
    P = np.array([[[0.5, 0.5], [0.5, 0.5]], [[0.9, 0.1], [0.2, 0.8]]])
    mdp = FiniteMDP(P=P, R=np.full((2, 2), 1.25))
    assert rollout_value(mdp, uniform_policy(2), np.random.default_rng(0), 10, 10) == 1.25


def test_toy_uniform_rollout_near_zero():
    # single n_eval=1000 estimates have sd ~0.017 (heavy tails), so average forty
    v = [rollout_value(ToyEnv(), uniform_policy(2), np.random.default_rng(s), n_eval=1000) for s in range(40)]
    assert abs(np.mean(v)) < 0.03


def test_t1d_behavior_rollout():
    env = T1DEnv()
    v = rollout_value(env, env.behavior_policy(), np.random.default_rng(6), n_eval=1000)
    assert v == pytest.approx(-2.3, abs=0.1)


def test_finite_mdp_dp_matches_bellman(mdp):
    pol = ConstantPolicy([0.3, 0.7])
    V = mdp.dp_value(pol, 0.8)
    Pi = np.array([0.3, 0.7])
    for s in range(2):
        rhs = sum(Pi[a] * mdp.P[a, s] @ (mdp.R[a, s] + 0.8 * V) for a in range(2))
        assert V[s] == pytest.approx(rhs, abs=1e-12)
    d = mdp.stationary()
    P_mu = 0.5 * (mdp.P[0] + mdp.P[1])
    np.testing.assert_allclose(d @ P_mu, d, atol=1e-12)
