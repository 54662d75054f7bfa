import numpy as np
import pytest

from noisescatter.beams import BeamAnchor, build_beam
from noisescatter.geometry import Metric, rotate

BUMP_PARAMS = dict(amplitude=0.2, bump_center=(0.1, 0.05))


def standard_anchor(T=5.0):
    z = 2.0 * np.array([np.cos(0.3), np.sin(0.3)])
    return BeamAnchor(T, tuple(z), tuple(rotate(-z / 2, 0.25)))


@pytest.fixture(scope="session")
def euclid():
    return Metric()


@pytest.fixture(scope="session")
def bump():
    return Metric(**BUMP_PARAMS)


@pytest.fixture(scope="session")
def euclid_beam(euclid):
    return build_beam(euclid, standard_anchor())


@pytest.fixture(scope="session")
def bump_beam(bump):
    return build_beam(bump, standard_anchor())


# one line per acceptance criterion, printed after the run
REPORT = []


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
