import numpy as np
import pytest

from pmpfold.topology import bundled_molecule


@pytest.fixture(scope="session")
def minimal():
    return bundled_molecule("minimal")


@pytest.fixture(scope="session")
def butane():
    return bundled_molecule("butane")


@pytest.fixture(scope="session")
def dialanine():
    return bundled_molecule("dialanine")


@pytest.fixture(scope="session")
def sidechains():
    return bundled_molecule("dialanine_sidechains")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
