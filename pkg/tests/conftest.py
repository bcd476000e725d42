import numpy as np
import pytest

from aoi_eh.model import EhChain, EnvConfig, HarqModel, correlated_config, default_config
from aoi_eh.planner import rvi_solve


def tiny_config(**kw):
    base = dict(harq=HarqModel(table=(0.5, 0.25), r_max=1), eh=EhChain.iid(0.5), b_max=2,
                e_s=1, e_tx=1, delta_max=4)
    base.update(kw)
    return EnvConfig(**base)


def random_tiny_config(rng):
    """Random small config; the state count stays at or below 200."""
    r_max = int(rng.integers(1, 3))
    g = np.sort(rng.uniform(0.05, 0.9, r_max + 1))[::-1]
    p = rng.uniform(0.1, 0.9, 2)
    eh = EhChain(np.array([[1 - p[0], p[0]], [1 - p[1], p[1]]]))
    b_max = int(rng.integers(1, 3))
    dmax = int(rng.integers(2, 5))
    cfg = EnvConfig(harq=HarqModel(table=tuple(g), r_max=r_max), eh=eh, b_max=b_max,
                    e_s=int(rng.integers(0, 2)), e_tx=1, delta_max=dmax)
    return cfg


@pytest.fixture(scope="session")
def default_cfg():
    return default_config()


@pytest.fixture(scope="session")
def default_sol(default_cfg):
    return rvi_solve(default_cfg)


@pytest.fixture(scope="session")
def correlated_sol():
    return rvi_solve(correlated_config())


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
