import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vlearning.simenv import FiniteMDP, ToyEnv, generate_offline

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at session end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def two_state_mdp(**kw) -> FiniteMDP:
    # action 1 tends to move to state 1, which pays more
    P = np.array(
        [
            [[0.8, 0.2], [0.6, 0.4]],
            [[0.3, 0.7], [0.1, 0.9]],
        ]
    )
    R = np.array(
        [
            [[0.0, 1.0], [0.0, 1.0]],
            [[-0.5, 0.5], [-0.5, 0.5]],
        ]
    )
    return FiniteMDP(P=P, R=R, **kw)


@pytest.fixture
def mdp():
    return two_state_mdp()


@pytest.fixture(scope="session")
def toy_data():
    return generate_offline(ToyEnv(), 20, 12, np.random.default_rng(11))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
