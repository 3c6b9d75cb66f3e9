import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pmala.models import TRUE_PARAMS, LinearGaussianSSM, lgss_simulate

settings.register_profile("pmala", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pmala")


@pytest.fixture(scope="session")
def lgss():
    return LinearGaussianSSM()


@pytest.fixture(scope="session")
def lgss_data():
    return lgss_simulate(TRUE_PARAMS, 50, np.random.default_rng(11))[1]


@pytest.fixture(scope="session")
def x_true():
    return TRUE_PARAMS.to_unconstrained()


# ---------------------------------------------------------------- acceptance report

_CRITERIA = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append((number, line))
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(line)
