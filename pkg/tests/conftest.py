import numpy as np
import pytest

from mkvmaster.fbsde import InitialLawSpec, SolverParams, solve_small_time
from mkvmaster.grid import TimeGrid
from mkvmaster.lq_oracle import LqSpec, solve_riccati
from mkvmaster.scenario import build_scenario

# scalar LQ configuration shared by the solver tests
LQ_PARAMS = {"rho": -0.5, "T": 1.0}
LQ_INIT = InitialLawSpec(kind="normal", mean=1.0, std=0.5)


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="session")
def lq_spec():
    return LqSpec(**LQ_PARAMS)


@pytest.fixture(scope="session")
def lq_mfg_small(lq_spec):
    """A modest LQ game solve (N=2048, K=32) reused by several tests."""
    c = build_scenario("lq_mfg", LQ_PARAMS)
    grid = TimeGrid(0.0, 1.0, 32)
    params = SolverParams(n_particles=2048, n_steps=32, basis_degree=1, mean_regressor=True, seed=11)
    ens, fld = solve_small_time(c, LQ_INIT, grid, params)
    sol = solve_riccati(lq_spec, "mfg", grid)
    return c, grid, params, ens, fld, sol


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
