import pytest
from hypothesis import HealthCheck, settings

from stslab.numerics import RngStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Criterion verdicts collected by test_acceptance.py, echoed in the terminal summary.
VERDICTS = []


@pytest.fixture
def rng():
    return RngStream(1234, "eval")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
