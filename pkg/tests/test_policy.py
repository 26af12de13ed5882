from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlearning.policy import (
    ConstantPolicy,
    MixturePolicy,
    PatientPolicies,
    SoftmaxPolicy,
    epsilon_greedy,
    sample_action,
    sample_actions,
    uniform_policy,
)

coef = st.floats(-30, 30, allow_nan=False)


def _decimal_softmax(beta, state):
    # 50-digit reference with the last action fixed at logit 0
    getcontext().prec = 50
    x = [Decimal(1)] + [Decimal(float(s)) for s in state]
    z = [sum(Decimal(float(b)) * xi for b, xi in zip(row, x)) for row in beta] + [Decimal(0)]
    m = max(z)
    e = [(zi - m).exp() for zi in z]
    tot = sum(e)
    return np.array([float(ei / tot) for ei in e])


@pytest.mark.property_suite
def test_zero_coefficients_uniform():
    for K in (2, 3, 8):
        p = SoftmaxPolicy.zeros(K, 2).probabilities([0.4, -3.0])
        np.testing.assert_allclose(p, np.full(K, 1.0 / K), rtol=0, atol=1e-15)


def test_binary_is_sigmoid():
    beta = np.array([[0.3, -1.2, 2.0]])
    s = np.array([0.7, 0.1])
    z = 0.3 - 1.2 * 0.7 + 2.0 * 0.1
    p = SoftmaxPolicy(beta, 2).probabilities(s)
    assert p[0] == pytest.approx(1 / (1 + np.exp(-z)), rel=1e-14)
    assert p[1] == pytest.approx(1 / (1 + np.exp(z)), rel=1e-14)


@given(arrays(float, (3, 3), elements=coef), arrays(float, 2, elements=st.floats(-5, 5)))
@pytest.mark.property_suite
def test_matches_high_precision(beta, state):
    p = SoftmaxPolicy(beta, 4).probabilities(state)
    np.testing.assert_allclose(p, _decimal_softmax(beta, state), rtol=0, atol=1e-12)


@given(arrays(float, (2, 3), elements=st.floats(-400, 400)), arrays(float, (5, 2), elements=st.floats(-5, 5)))
@pytest.mark.property_suite
def test_distribution_property(beta, states):
    P = SoftmaxPolicy(beta, 3).probabilities(states)
    assert np.all(np.isfinite(P))
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        SoftmaxPolicy.zeros(2, 2).probabilities([1.0, 2.0, 3.0])


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        SoftmaxPolicy([[np.nan, 0.0]], 2)


def test_text_round_trip():
    pol = SoftmaxPolicy(np.arange(6.0).reshape(2, 3) / 7, 3)
    back = SoftmaxPolicy.from_text(pol.to_text())
    np.testing.assert_array_equal(back.beta, pol.beta)


@pytest.mark.property_suite
def test_epsilon_greedy_example():
    np.testing.assert_allclose(epsilon_greedy(2, 4, 0.3), [0.1, 0.1, 0.7, 0.1])


@pytest.mark.property_suite
def test_mixture_endpoints():
    main = ConstantPolicy([0.9, 0.1])
    fb = uniform_policy(2)
    np.testing.assert_array_equal(MixturePolicy(main, fb, 1.0).probabilities([0.0]), [0.5, 0.5])
    np.testing.assert_array_equal(MixturePolicy(main, fb, 0.0).probabilities([0.0]), [0.9, 0.1])
    np.testing.assert_allclose(MixturePolicy(main, fb, 0.5).probabilities([0.0]), [0.7, 0.3])


def test_constant_policy_validation():
    with pytest.raises(ValueError):
        ConstantPolicy([0.5, 0.6])


def test_sampling_frequencies():
    pol = SoftmaxPolicy([[0.5, 0.0], [-0.5, 0.0]], 3)
    rng = np.random.default_rng(0)
    n = 100_000
    a = sample_actions(pol, np.zeros((n, 1)), rng)
    p = pol.probabilities([0.0])
    freq = np.bincount(a, minlength=3) / n
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) < 3 * se)


def test_sample_action_deterministic():
    pol = uniform_policy(5)
    a = [sample_action(pol, [0.0], np.random.default_rng(3)) for _ in range(3)]
    assert len(set(a)) == 1


def test_degenerate_policy_always_same_action():
    pol = ConstantPolicy([0.0, 1.0, 0.0])
    a = sample_actions(pol, np.zeros((500, 1)), np.random.default_rng(1))
    assert np.all(a == 1)


def test_patient_policies_rows():
    pp = PatientPolicies((ConstantPolicy([1.0, 0.0]), ConstantPolicy([0.0, 1.0])))
    np.testing.assert_array_equal(pp.probabilities(np.zeros((2, 1))), [[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        pp.probabilities(np.zeros((3, 1)))
