import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from psngame.game import DEFAULT_WEIGHTS, DynamicsSpec, GameSpec

settings.register_profile(
    "default", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_game(rng, n, side=5.0, spacing=0.5, horizon=10, speed=0.0, weights=DEFAULT_WEIGHTS):
    """Random scene with pairwise start spacing >= ``spacing``."""
    while True:
        p = rng.uniform(-side / 2, side / 2, (n, 2))
        d = np.linalg.norm(p[:, None] - p[None], axis=-1) + 9 * np.eye(n)
        if n == 1 or d.min() >= spacing:
            break
    x0 = np.zeros((n, 4))
    x0[:, :2] = p
    x0[:, 2:] = rng.normal(0, speed, (n, 2)) if speed else 0.0
    goals = rng.uniform(-side / 2, side / 2, (n, 2))
    return GameSpec(DynamicsSpec(0.1, horizon), weights, x0, goals)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: list = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        print(line)
        _VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
