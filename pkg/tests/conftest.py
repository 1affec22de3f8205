import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nlch.kernels import certify_assumption, make_kernel

settings.register_profile("nlch", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("nlch")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def certifications():
    """Certification reports for the built-in families in d=2 (about 5 s each)."""
    return {fam: certify_assumption(make_kernel(fam, 2)) for fam in ("bump", "gaussian", "carrillo_exponential")}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
