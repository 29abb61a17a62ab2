import numpy as np
import pytest

from cgdyn import conditional, model
from cgdyn._parallel import default_workers

BETA = 3.0

_ACCEPTANCE = []


def record_criterion(number, status, detail):
    line = f"{status} criterion {number:2d}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def workers():
    return default_workers()


@pytest.fixture(scope="session")
def doublewell():
    return model.builtin_doublewell(0.01)


@pytest.fixture(scope="session")
def xi1():
    return model.builtin_xi1()


@pytest.fixture(scope="session")
def xi2():
    return model.builtin_xi2()


_XI2_TABLES = {}


def xi2_table(epsilon, workers=1):
    """Quadrature table of xi2 on the full production grid, built once per session."""
    if epsilon not in _XI2_TABLES:
        _XI2_TABLES[epsilon] = conditional.build_coefficient_table(
            model.builtin_doublewell(epsilon), model.builtin_xi2(), BETA, conditional.XI2_GRID, workers=workers
        )
    return _XI2_TABLES[epsilon]


@pytest.fixture(scope="session")
def xi2_table_001(workers):
    return xi2_table(0.01, workers)


@pytest.fixture(scope="session")
def xi2_table_0001(workers):
    return xi2_table(0.001, workers)


@pytest.fixture(scope="session")
def xi1_table():
    return conditional.xi1_analytic_table(BETA, conditional.GridSpec(-3, 3, 1e-3).nodes())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
