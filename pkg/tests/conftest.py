import math

import numpy as np
import pytest

from driftblend import flowfield as ff


def make_grid(lon0=-92.0, lat0=24.0, step=0.25, nlon=12, nlat=10, t0=0.0, dt_grid=3600.0, nt=3):
    return ff.GridSpec(lon0=lon0, lat0=lat0, dlon=step, dlat=step, nlon=nlon, nlat=nlat, t0=t0, dt_grid=dt_grid, nt=nt)


def uniform_field(c, spec=None, name="field"):
    spec = spec or make_grid()
    return ff.GriddedVelocityField.from_function(spec, lambda lon, lat, t: (np.full_like(lon, c[0]), np.full_like(lon, c[1])), name)


@pytest.fixture
def grid():
    return make_grid()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def straight_track(n=10, d_deg=0.01, lon0=-90.0, lat0=25.0, t0=0.0, dt=900.0, heading=(1.0, 0.0)):
    """Positions moving a fixed number of degrees per step along ``heading``."""
    from driftblend.integrate import Trajectory

    j = np.arange(n)
    lon = lon0 + heading[0] * d_deg * j
    lat = lat0 + heading[1] * d_deg * j
    z = np.zeros(n)
    return Trajectory("real", t0 + dt * j, lon, lat, z, z, np.zeros(n, dtype=np.int8))


EXPECTED_M_PER_DEG = math.pi / 180.0 * 6_371_000.0


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
