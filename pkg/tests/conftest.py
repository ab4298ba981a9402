import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from goaldrive.config import Config

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    """Small model for fast unit tests (16x16 frames, 16x16 grid)."""
    return Config(d_model=8, heads=2, frame_size=16, patch_vision=8, grid_size=16, patch_map=8,
                  mixer_layers=2, backbone_layers=2, frozen_layers=1, mlp_ratio=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """report(name, ok, detail) records one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(CRITERIA, [])

    def report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
