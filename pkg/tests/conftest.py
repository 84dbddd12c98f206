import numpy as np
import pytest

from vrs.simulator import SimulationConfig, generate_world

SMALL = dict(
    n_users=800, n_ads=40, n_requests=6000, n_days=4, warmup_requests=1500,
    calibration_requests=1500, min_impressions=50, click_examples=2000, click_epochs=3,
    collect_requests=8000, reward_max_updates=300,
)


@pytest.fixture(scope="session")
def small_config():
    return SimulationConfig(**SMALL)


@pytest.fixture(scope="session")
def small_world(small_config):
    return generate_world(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
