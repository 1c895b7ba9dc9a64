import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ddmpc.experiments import LTI3, LTI4, PEM4

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def lti3():
    return LTI3


@pytest.fixture
def lti4():
    return LTI4


@pytest.fixture
def pem4():
    return PEM4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stable(rng, n, m=1, p=1, rho=0.9):
    from ddmpc.plants import LinearModel

    A = rng.standard_normal((n, n))
    A *= rho / max(np.abs(np.linalg.eigvals(A)))
    return LinearModel(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)))


# criterion number -> (passed, detail); filled by test_acceptance and printed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
