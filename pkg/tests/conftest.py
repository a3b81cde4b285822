import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctexplain.mil_head import HeadParams

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_head(rng, M=None, F=None, D1=None, D2=None, H=None, scale=1.0):
    """Random head plus matching feature stack, dims drawn small."""
    M = M or int(rng.integers(1, 4))
    F = F or int(rng.integers(1, 4))
    D1 = D1 or int(rng.integers(1, 4))
    D2 = D2 or int(rng.integers(1, 4))
    H = H or int(rng.integers(1, 5))
    W = rng.normal(0, scale, size=(M, F * D1 * D2))
    b = rng.normal(0, scale, size=M)
    Z = rng.normal(0, 1, size=(H, F, D1, D2))
    return HeadParams(W, b, (M, F, D1, D2, H)), Z


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# Acceptance summary: one line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
