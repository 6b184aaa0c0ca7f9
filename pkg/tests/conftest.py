import sys
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def benchmark_constraints():
    from bouncyhybrid.model import ConstraintSet

    F = np.array([[-1.0, 1.1, 1.0, 0.0], [1.0, -1.0, 0.0, 1.0]])
    return ConstraintSet(F, np.zeros(4))


@pytest.fixture
def benchmark_target():
    from bouncyhybrid.model import GaussianTarget

    return GaussianTarget([4.0, 4.0], np.eye(2))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
