import numpy as np
import pytest

import mckean as mk
from mckean.simulator import SimulationConfig

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def hd_problem():
    return mk.builtin_problem("holder-diffusion")


@pytest.fixture(scope="session")
def hd_flow(hd_problem):
    """Converged law flow for the rough-diffusion problem on [0, 0.55]."""
    rng = np.random.default_rng(1)
    mu0 = mk.EmpiricalMeasure(0.5 * rng.standard_normal((2000, 1)))
    cfg = SimulationConfig(t=0.0, horizon=0.55, n_steps=64,
                           n_particles=2000, seed=7)
    _, flow = mk.simulate_mkv(hd_problem, mu0, cfg)
    return flow


@pytest.fixture(scope="session")
def hd_field(hd_problem, hd_flow):
    """Default-grid order-3 density field at horizon 0.25, shared by tests."""
    return mk.density_field(hd_problem, hd_flow, 0.0, [0.0], 0.25, 3)


@pytest.fixture
def acceptance():
    def record(name, passed, detail):
        ACCEPTANCE_RESULTS.append((name, passed, detail))
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}: {detail}")
