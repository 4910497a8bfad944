import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cases import heat_config, pme_config  # noqa: E402
from minmove.scheme import run  # noqa: E402


@pytest.fixture(scope="session")
def heat_small():
    cfg, sol = heat_config(32, 16)
    traj, led = run(cfg)
    return cfg, sol, traj, led


@pytest.fixture(scope="session")
def pme_small():
    cfg, sol = pme_config(48, 24)
    traj, led = run(cfg)
    return cfg, sol, traj, led
