import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prunebench.model import build_cnn5

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_difference(f, x: np.ndarray, idx, h: float = 1e-5) -> float:
    up, down = x.copy(), x.copy()
    up[idx] += h
    down[idx] -= h
    return (f(up) - f(down)) / (2 * h)


def stable_central_difference(f, x: np.ndarray, idx, steps=(1e-5, 1e-6, 1e-7), rtol: float = 1e-6) -> float:
    """Central difference that steps over ReLU / max-pool kinks.

    When a kink lies within ``h`` of ``x`` the estimate averages two slopes;
    it then disagrees with the estimate at ``h / 10``, and the step shrinks.
    """
    for h in steps:
        coarse, fine = central_difference(f, x, idx, h), central_difference(f, x, idx, h / 10)
        if abs(coarse - fine) <= rtol * max(1.0, abs(fine)):
            return coarse
    return fine


@pytest.fixture
def small_net():
    return build_cnn5((20, 20, 1), classes=3, seed=0, filters=(2, 3), dense=(6, 4))


# acceptance verdicts, echoed after the run so they survive output capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
