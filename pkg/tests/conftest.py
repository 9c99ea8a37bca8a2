import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


def smooth_coeffs(rng, N, mass=0.1, decay=2.0):
    n = np.arange(-N, N + 1)
    c = (rng.normal(size=2 * N + 1) + 1j * rng.normal(size=2 * N + 1)) / (1.0 + np.abs(n)) ** decay
    return c * np.sqrt(mass / np.sum(np.abs(c) ** 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(results):
        terminalreporter.write_line(line)
