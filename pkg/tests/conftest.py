import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pcql.data import ingest
from pcql.simenv import GenerateConfig, generate_surgeries

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_splits():
    """20 short simulated surgeries, ingested with a pinned dose scale."""
    raw = generate_surgeries(GenerateConfig(n_surgeries=20, duration_min=40, duration_max=50, seed=3))
    return ingest(raw, seed=0, p_max=12.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
