import sys

import numpy as np
import pytest

from w2delta.geom import GraphDomain, HolderGraph
from w2delta.solutions import CutCellGrid, ManufacturedSolution, sample, solve_linear


def flat(R=1.0, n=2):
    return GraphDomain(HolderGraph("flat"), R=R, dim=n)


def cusp(R=1.0, n=2):
    return GraphDomain(HolderGraph("power-cusp", amplitude=0.5, alpha=0.5), R=R, dim=n)


def wavy(R=1.0, n=2):
    return GraphDomain(HolderGraph("sinusoid", amplitude=0.1, frequency=4.0), R=R, dim=n)


DOMAINS = {"flat": flat, "power-cusp": cusp, "sinusoid": wavy}


@pytest.fixture(scope="session")
def wavy_solutions():
    """Solver outputs for a smooth-bump solution on the sinusoid domain at three mesh widths."""
    ms = ManufacturedSolution("smooth-bump", coeffs=(1.0, 2.0))
    dom = wavy()
    out = {}
    for h in (1 / 128, 1 / 256, 1 / 512):
        grid = CutCellGrid(dom, h)
        u, f, g = sample(ms, grid)
        out[h] = (solve_linear(dom, (1.0, 2.0), f, g, h, method="direct", grid=grid), f, g)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
