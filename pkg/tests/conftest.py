import numpy as np
import pytest

from posfuse.channel_sim import AnchorGeometry, Environment, ScenarioSpec, default_environment, gen_dataset


def two_anchor_env(n_antennas=1, n_subcarriers=8, scatterers=(), **kw) -> Environment:
    anchors = (
        AnchorGeometry(1, (0.0, 0.0), n_antennas=n_antennas, boresight=0.0),
        AnchorGeometry(2, (10.0, 10.0), n_antennas=n_antennas, boresight=np.pi),
    )
    return Environment(((0.0, 0.0), (10.0, 10.0)), anchors, tuple(scatterers), n_subcarriers=n_subcarriers, **kw)


@pytest.fixture(scope="session")
def small_env():
    """Four anchors, 4 antennas, 16 subcarriers: cheap to train on."""
    return default_environment(seed=11, n_antennas=4, n_subcarriers=16, n_scatterers=8)


@pytest.fixture(scope="session")
def small_dataset(small_env):
    return gen_dataset(small_env, 300, ScenarioSpec(), seed=3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
