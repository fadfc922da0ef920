import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from jointcal.types import MarketEnv

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def env():
    return MarketEnv(spot=100.0, rate=0.02, dividend_yield=0.03)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
