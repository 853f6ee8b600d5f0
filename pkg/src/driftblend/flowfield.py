"""Gridded and analytic surface velocity fields.

Gridded fields are interpolated with a bicubic Catmull-Rom spline in
(lon, lat) and linearly in time. Velocities are (east, north) in m/s;
spatial gradients are per metre using a local equirectangular metric.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import kernels

EARTH_RADIUS = 6_371_000.0
M_PER_DEG = math.pi / 180.0 * EARTH_RADIUS
EKMAN_COEFF = 0.0127
EQUATOR_GUARD_DEG = 2.0

_SQRT_HALF = math.sqrt(0.5)


class FlowFieldError(ValueError):
    pass


class MalformedHeaderError(FlowFieldError):
    pass


class NonMonotoneAxisError(FlowFieldError):
    pass


class NonUniformGridError(FlowFieldError):
    pass


class SizeMismatchError(FlowFieldError):
    pass


class OutOfDomainError(FlowFieldError):
    pass


class MaskedSupportError(FlowFieldError):
    pass


class InsufficientMarginError(FlowFieldError):
    pass


class EquatorialGuardError(FlowFieldError):
    pass


@dataclass(frozen=True)
class GridSpec:
    lon0: float
    lat0: float
    dlon: float
    dlat: float
    nlon: int
    nlat: int
    t0: float
    dt_grid: float
    nt: int

    def __post_init__(self):
        if not (self.dlon > 0 and self.dlat > 0 and self.dt_grid > 0):
            raise MalformedHeaderError("grid spacings must be positive")
        if self.nlon < 4 or self.nlat < 4:
            raise MalformedHeaderError("need at least 4 nodes in lon and lat")
        if self.nt < 2:
            raise MalformedHeaderError("need at least 2 time levels")
        if not (-90.0 < self.lat0 and self.lat_max < 90.0):
            raise MalformedHeaderError("latitudes must lie strictly inside (-90, 90)")

    @property
    def lon_max(self) -> float:
        return self.lon0 + (self.nlon - 1) * self.dlon

    @property
    def lat_max(self) -> float:
        return self.lat0 + (self.nlat - 1) * self.dlat

    @property
    def t_max(self) -> float:
        return self.t0 + (self.nt - 1) * self.dt_grid

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.nlon)

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(self.nlat)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt_grid * np.arange(self.nt)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nt, self.nlat, self.nlon)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class FieldSample(NamedTuple):
    vel: np.ndarray  # (N, 2)
    dvdx: np.ndarray  # (N, 2) per metre east
    dvdy: np.ndarray  # (N, 2) per metre north
    dvdt: np.ndarray  # (N, 2) per second
    outside: np.ndarray  # (N,) bool
    masked: np.ndarray  # (N,) bool; support touched a masked cell


def _pad_linear(a: np.ndarray) -> np.ndarray:
    """Add one ghost node on each side of the last two axes by linear extrapolation."""
    out = np.empty(a.shape[:-2] + (a.shape[-2] + 2, a.shape[-1] + 2))
    out[..., 1:-1, 1:-1] = a
    out[..., 1:-1, 0] = 2.0 * a[..., :, 0] - a[..., :, 1]
    out[..., 1:-1, -1] = 2.0 * a[..., :, -1] - a[..., :, -2]
    out[..., 0, :] = 2.0 * out[..., 1, :] - out[..., 2, :]
    out[..., -1, :] = 2.0 * out[..., -2, :] - out[..., -3, :]
    return out


def _nearest_fill(a: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid cells of each (lat, lon) slab by the nearest valid cell."""
    out = a.copy()
    for k in range(a.shape[0]):
        if valid[k].all() or not valid[k].any():
            continue
        idx = ndimage.distance_transform_edt(~valid[k], return_distances=False, return_indices=True)
        out[k] = a[k][tuple(idx)]
    return out


@dataclass(frozen=True, eq=False)
class GriddedVelocityField:
    """Space-time grid of 2D velocity with a validity mask (True = valid)."""

    spec: GridSpec
    u: np.ndarray
    v: np.ndarray
    mask: np.ndarray
    name: str = "field"
    _data: np.ndarray = field(init=False, repr=False)
    _filled: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = self.spec.shape
        u = np.array(self.u, dtype=np.float64)
        v = np.array(self.v, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if u.shape != shape or v.shape != shape or mask.shape != shape:
            raise SizeMismatchError(f"arrays must have shape {shape}")
        valid = mask & np.isfinite(u) & np.isfinite(v)
        u[~valid] = np.nan
        v[~valid] = np.nan
        for arr in (u, v, valid):
            arr.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "mask", valid)

        # slab 2*k + c holds component c at time level k
        stacked = np.stack([u, v], axis=1).reshape((-1,) + shape[1:])
        stacked_valid = np.repeat(valid, 2, axis=0)
        object.__setattr__(self, "_data", np.ascontiguousarray(_pad_linear(stacked)))
        filled = _nearest_fill(stacked, stacked_valid)
        object.__setattr__(self, "_filled", np.ascontiguousarray(_pad_linear(filled)))

    @classmethod
    def from_function(cls, spec: GridSpec, fn, name="field") -> "GriddedVelocityField":
        """Sample ``fn(lon, lat, t) -> (u, v)`` at every node."""
        t, lat, lon = np.meshgrid(spec.times, spec.lats, spec.lons, indexing="ij")
        u, v = fn(lon, lat, t)
        u = np.broadcast_to(np.asarray(u, dtype=np.float64), spec.shape)
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), spec.shape)
        return cls(spec, u, v, np.ones(spec.shape, dtype=bool), name=name)

    def evaluate(self, lon, lat, t, derivatives=False, margin=False, fallback=False) -> FieldSample:
        """Vectorised evaluation that flags rather than raises.

        With ``margin=True`` points whose cubic support would reach the
        extrapolated ghost ring are flagged as outside.
        """
        s = self.spec
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        lon, lat = np.broadcast_arrays(lon, lat)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), lon.shape)
        lon, lat, t = lon.ravel(), lat.ravel(), t.ravel()

        xi = (lon - s.lon0) / s.dlon
        eta = (lat - s.lat0) / s.dlat
        tau = (t - s.t0) / s.dt_grid
        tol = 1e-9
        lo = 1.0 if margin else 0.0
        outside = ~(
            (xi >= lo - tol)
            & (xi <= s.nlon - 1 - lo + tol)
            & (eta >= lo - tol)
            & (eta <= s.nlat - 1 - lo + tol)
            & (tau >= -tol)
            & (tau <= s.nt - 1 + tol)
        )
        outside |= ~(np.isfinite(xi) & np.isfinite(eta) & np.isfinite(tau))

        xi = np.clip(np.where(outside, lo, xi), lo, s.nlon - 1 - lo)
        eta = np.clip(np.where(outside, lo, eta), lo, s.nlat - 1 - lo)
        tau = np.clip(np.where(outside, 0.0, tau), 0.0, s.nt - 1)
        it = np.minimum(np.floor(tau).astype(np.int64), s.nt - 2)
        wt = (tau - it)[:, None]

        slabs = np.stack([2 * it, 2 * it + 1, 2 * it + 2, 2 * it + 3], axis=1)
        fx = np.ascontiguousarray(xi + 1.0)
        fy = np.ascontiguousarray(eta + 1.0)
        val, ddx, ddy = kernels.eval_slabs(self._data, slabs, fx, fy)
        masked = ~np.isfinite(val).all(axis=1)
        if derivatives:
            masked |= ~(np.isfinite(ddx).all(axis=1) & np.isfinite(ddy).all(axis=1))
        masked &= ~outside
        if fallback and masked.any():
            fval, fdx, fdy = kernels.eval_slabs(self._filled, slabs[masked], fx[masked], fy[masked])
            val[masked], ddx[masked], ddy[masked] = fval, fdx, fdy

        v0, v1 = val[:, 0:2], val[:, 2:4]
        vel = (1.0 - wt) * v0 + wt * v1
        n = lon.size
        if derivatives:
            gx = (1.0 - wt) * ddx[:, 0:2] + wt * ddx[:, 2:4]
            gy = (1.0 - wt) * ddy[:, 0:2] + wt * ddy[:, 2:4]
            dvdx = gx / (s.dlon * M_PER_DEG * np.cos(np.radians(lat)))[:, None]
            dvdy = gy / (s.dlat * M_PER_DEG)
            dvdt = (v1 - v0) / s.dt_grid
        else:
            dvdx = dvdy = dvdt = np.zeros((n, 2))
        bad = outside | (masked & (not fallback))
        vel = np.where(bad[:, None], np.nan, vel)
        return FieldSample(vel, dvdx, dvdy, dvdt, outside, masked)


def _check(sample: FieldSample, margin: bool, fallback: bool):
    if sample.outside.any():
        if margin:
            raise InsufficientMarginError("query needs a one-cell margin from the grid edge")
        raise OutOfDomainError("query outside the grid bounding box")
    if sample.masked.any() and not fallback:
        raise MaskedSupportError("interpolation support touches masked cells")


def _shape_out(arr: np.ndarray, scalar: bool) -> np.ndarray:
    return arr[0] if scalar else arr


def sample_velocity(field: GriddedVelocityField, lon, lat, t, fallback=False) -> np.ndarray:
    """Interpolated velocity, shape ``(2,)`` for scalar input, else ``(N, 2)``."""
    scalar = np.ndim(lon) == 0 and np.ndim(lat) == 0
    s = field.evaluate(lon, lat, t, fallback=fallback)
    _check(s, margin=False, fallback=fallback)
    return _shape_out(s.vel, scalar)


def material_derivative(field: GriddedVelocityField, lon, lat, t, fallback=False) -> np.ndarray:
    """Du/Dt = du/dt + (u . grad) u of the interpolant, in m/s^2."""
    scalar = np.ndim(lon) == 0 and np.ndim(lat) == 0
    s = field.evaluate(lon, lat, t, derivatives=True, margin=True, fallback=fallback)
    _check(s, margin=True, fallback=fallback)
    vel = s.vel
    dudt = s.dvdt + vel[:, 0:1] * s.dvdx + vel[:, 1:2] * s.dvdy
    return _shape_out(dudt, scalar)


def _ekman_rotation(lat):
    """Rotation by 45 degrees: clockwise north of the equator, anticlockwise south."""
    sign = np.where(np.asarray(lat) >= 0.0, 1.0, -1.0)
    c = _SQRT_HALF
    s = sign * _SQRT_HALF
    return c, s


def _guard(lat):
    lat = np.asarray(lat, dtype=np.float64)
    if np.any(np.abs(lat) < EQUATOR_GUARD_DEG) or not np.all(np.isfinite(lat)):
        raise EquatorialGuardError(f"Ekman velocity undefined within {EQUATOR_GUARD_DEG} deg of the equator")
    return lat


def ekman_factor(lat):
    """Magnitude ratio |u_e| / |wind10| = 0.0127 / sqrt(sin|lat|)."""
    lat = _guard(lat)
    return EKMAN_COEFF / np.sqrt(np.sin(np.radians(np.abs(lat))))


def ekman_velocity(wind10, lat) -> np.ndarray:
    """Ekman surface velocity from the 10 m wind."""
    w = np.asarray(wind10, dtype=np.float64)
    k = ekman_factor(lat)
    c, s = _ekman_rotation(lat)
    ex = k * (c * w[..., 0] + s * w[..., 1])
    ey = k * (-s * w[..., 0] + c * w[..., 1])
    return np.stack([ex, ey], axis=-1)


def _ekman_with_gradient(wind, dwdx, dwdy, dwdt, lat):
    """Ekman velocity and its gradients given the wind and its gradients."""
    k = ekman_factor(lat)
    c, s = _ekman_rotation(lat)

    def rot(w):
        return np.stack([c * w[..., 0] + s * w[..., 1], -s * w[..., 0] + c * w[..., 1]], axis=-1)

    phi = np.radians(np.abs(lat))
    # d k / d(northward metre); sign(lat) from the |lat| inside the sine
    dk_dy = -0.5 * k * np.cos(phi) / np.sin(phi) * np.sign(lat) / EARTH_RADIUS
    rw = rot(wind)
    ue = k[:, None] * rw
    duedx = k[:, None] * rot(dwdx)
    duedy = k[:, None] * rot(dwdy) + dk_dy[:, None] * rw
    duedt = k[:, None] * rot(dwdt)
    return ue, duedx, duedy, duedt


def total_surface_velocity(current: GriddedVelocityField, wind: GriddedVelocityField, lon, lat, t) -> np.ndarray:
    """Geostrophic current plus the Ekman velocity of the local wind."""
    ug = sample_velocity(current, lon, lat, t)
    w = sample_velocity(wind, lon, lat, t)
    return ug + ekman_velocity(w, lat)


# ---------------------------------------------------------------- analytic fields


class AnalyticField:
    """Closed-form planar velocity field on local metric coordinates (x, y) in metres."""

    def evaluate(self, x, y, t):
        """Return ``(vel, jac, dvdt)``; ``jac[..., i, j] = d vel_i / d x_j``."""
        raise NotImplementedError

    def velocity(self, x, y, t):
        return self.evaluate(x, y, t)[0]


@dataclass(frozen=True)
class UniformStream(AnalyticField):
    c: tuple[float, float]

    def evaluate(self, x, y, t):
        x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, t)))
        vel = np.empty(x.shape + (2,))
        vel[..., 0] = self.c[0]
        vel[..., 1] = self.c[1]
        return vel, np.zeros(x.shape + (2, 2)), np.zeros(x.shape + (2,))


@dataclass(frozen=True)
class SolidRotation(AnalyticField):
    omega: float

    def evaluate(self, x, y, t):
        x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, t)))
        vel = np.stack([-self.omega * y, self.omega * x], axis=-1)
        jac = np.zeros(x.shape + (2, 2))
        jac[..., 0, 1] = -self.omega
        jac[..., 1, 0] = self.omega
        return vel, jac, np.zeros(x.shape + (2,))


@dataclass(frozen=True)
class DoubleGyre(AnalyticField):
    """Periodically forced double gyre on ``[0, 2L] x [0, L]``.

    ``amplitude`` in m/s, ``eps_g`` the forcing amplitude, ``omega`` in rad/s
    and ``scale`` (L) in metres.
    """

    amplitude: float
    eps_g: float
    omega: float
    scale: float

    def evaluate(self, x, y, t):
        x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, t)))
        A, L = self.amplitude, self.scale
        X = x / L
        Y = y / L
        sw = np.sin(self.omega * t)
        cw = np.cos(self.omega * t)
        a = self.eps_g * sw
        b = 1.0 - 2.0 * a
        da = self.eps_g * self.omega * cw
        db = -2.0 * da
        F = a * X * X + b * X
        Fx = 2.0 * a * X + b
        Fxx = 2.0 * a
        Ft = da * X * X + db * X
        Fxt = 2.0 * da * X + db

        pi = math.pi
        sF, cF = np.sin(pi * F), np.cos(pi * F)
        sY, cY = np.sin(pi * Y), np.cos(pi * Y)

        u = -pi * A * sF * cY
        v = pi * A * cF * sY * Fx
        jac = np.empty(x.shape + (2, 2))
        jac[..., 0, 0] = -pi * pi * A * cF * Fx * cY / L
        jac[..., 0, 1] = pi * pi * A * sF * sY / L
        jac[..., 1, 0] = pi * A * (-pi * sF * Fx * Fx + cF * Fxx) * sY / L
        jac[..., 1, 1] = pi * pi * A * cF * cY * Fx / L
        dvdt = np.stack(
            [
                -pi * pi * A * cF * Ft * cY,
                pi * A * (-pi * sF * Ft * Fx + cF * Fxt) * sY,
            ],
            axis=-1,
        )
        return np.stack([u, v], axis=-1), jac, dvdt


@dataclass(frozen=True)
class RotatingStream(AnalyticField):
    """Mean stream plus a vector of fixed length rotating with phase ``omega*t + kx*x + ky*y``.

    Used as a smooth, time-varying synthetic wind.
    """

    base: tuple[float, float]
    amplitude: float
    omega: float
    kx: float = 0.0
    ky: float = 0.0

    def evaluate(self, x, y, t):
        x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, t)))
        ph = self.omega * t + self.kx * x + self.ky * y
        c, s = np.cos(ph), np.sin(ph)
        a = self.amplitude
        vel = np.stack([self.base[0] + a * c, self.base[1] + a * s], axis=-1)
        dph = np.stack([-a * s, a * c], axis=-1)
        jac = np.stack([dph * self.kx, dph * self.ky], axis=-1)
        return vel, jac, dph * self.omega


def analytic_sample(fld: AnalyticField, x, t):
    """Velocity and material derivative of an analytic field at planar position ``x``."""
    x = np.asarray(x, dtype=np.float64)
    vel, jac, dvdt = fld.evaluate(x[..., 0], x[..., 1], t)
    dudt = dvdt + np.einsum("...ij,...j->...i", jac, vel)
    return vel, dudt


# ---------------------------------------------------------------- flow contexts


class FlowSample(NamedTuple):
    """Total surface velocity and its companions at a set of points.

    ``u`` is the resultant current (geostrophic plus Ekman); ``dudt`` its
    material derivative; ``f`` the Coriolis parameter.
    """

    u: np.ndarray
    u_e: np.ndarray
    u_wind: np.ndarray
    dudt: np.ndarray
    f: np.ndarray
    valid: np.ndarray
    masked: np.ndarray | None = None


OMEGA_EARTH = 7.2921159e-5


def coriolis_parameter(lat):
    """Signed Coriolis parameter 2 * Omega * sin(lat) in 1/s."""
    return 2.0 * OMEGA_EARTH * np.sin(np.radians(lat))


def _combine(lat, ug, gdx, gdy, gdt, wind, wdx, wdy, wdt, valid, masked=None):
    lat = np.asarray(lat, dtype=np.float64)
    safe_lat = np.where(valid, lat, 45.0)
    ue, edx, edy, edt = _ekman_with_gradient(wind, wdx, wdy, wdt, safe_lat)
    u = ug + ue
    dudt = (gdt + edt) + u[:, 0:1] * (gdx + edx) + u[:, 1:2] * (gdy + edy)
    nan = ~valid[:, None]
    return FlowSample(
        np.where(nan, np.nan, u),
        np.where(nan, np.nan, ue),
        np.where(nan, np.nan, wind),
        np.where(nan, np.nan, dudt),
        coriolis_parameter(lat),
        valid,
        masked,
    )


@dataclass(frozen=True, eq=False)
class GriddedFlow:
    """Surface flow from a gridded current and a gridded 10 m wind."""

    current: GriddedVelocityField
    wind: GriddedVelocityField
    fallback: bool = False

    def sample(self, lon, lat, t) -> FlowSample:
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64)).ravel()
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64)).ravel()
        c = self.current.evaluate(lon, lat, t, derivatives=True, margin=True, fallback=self.fallback)
        w = self.wind.evaluate(lon, lat, t, derivatives=True, margin=True, fallback=self.fallback)
        valid = ~(c.outside | w.outside) & (np.abs(lat) >= EQUATOR_GUARD_DEG)
        if not self.fallback:
            valid &= ~(c.masked | w.masked)
        valid &= np.isfinite(c.vel).all(axis=1) & np.isfinite(w.vel).all(axis=1)
        masked = (c.masked | w.masked) & ~valid

        def z(a):
            return np.where(valid[:, None], a, 0.0)

        return _combine(
            lat, z(c.vel), z(c.dvdx), z(c.dvdy), z(c.dvdt), z(w.vel), z(w.dvdx), z(w.dvdy), z(w.dvdt), valid, masked
        )


@dataclass(frozen=True, eq=False)
class AnalyticFlow:
    """Analytic current and wind placed on the sphere around ``origin`` (lon, lat).

    Local coordinates are ``x = (lon - lon0) * M_PER_DEG * cos(lat0)`` and
    ``y = (lat - lat0) * M_PER_DEG``; gradients are re-expressed per local
    metre east so they match the gridded convention.
    """

    current: AnalyticField
    wind: AnalyticField
    origin: tuple[float, float]
    bounds: tuple[float, float, float, float] | None = None  # lon_min, lon_max, lat_min, lat_max

    def to_local(self, lon, lat):
        lon0, lat0 = self.origin
        x = (np.asarray(lon) - lon0) * M_PER_DEG * math.cos(math.radians(lat0))
        y = (np.asarray(lat) - lat0) * M_PER_DEG
        return x, y

    def _geo(self, fld, x, y, t, lat):
        vel, jac, dvdt = fld.evaluate(x, y, t)
        stretch = math.cos(math.radians(self.origin[1])) / np.cos(np.radians(lat))
        return vel, jac[..., 0] * stretch[:, None], jac[..., 1], dvdt

    def sample(self, lon, lat, t) -> FlowSample:
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64)).ravel()
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64)).ravel()
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), lon.shape)
        valid = np.isfinite(lon) & np.isfinite(lat) & (np.abs(lat) >= EQUATOR_GUARD_DEG)
        if self.bounds is not None:
            a, b, c, d = self.bounds
            valid &= (lon >= a) & (lon <= b) & (lat >= c) & (lat <= d)
        lat_s = np.where(valid, lat, 45.0)
        lon_s = np.where(valid, lon, self.origin[0])
        x, y = self.to_local(lon_s, lat_s)
        g = self._geo(self.current, x, y, t, lat_s)
        w = self._geo(self.wind, x, y, t, lat_s)
        return _combine(lat_s, *g, *w, valid)


# ---------------------------------------------------------------- file format

FORMAT_VERSION = 1
_CSV_COLUMNS = ("time_index", "lat_index", "lon_index", "value")


def _axis_check(name, axis, start, step, n):
    axis = np.asarray(axis, dtype=np.float64)
    if axis.size != n:
        raise SizeMismatchError(f"axis {name} has {axis.size} entries, header declares {n}")
    d = np.diff(axis)
    if np.any(d <= 0):
        raise NonMonotoneAxisError(f"axis {name} is not strictly increasing")
    if not np.allclose(d, step, rtol=1e-6, atol=0.0) or not math.isclose(axis[0], start, rel_tol=1e-9, abs_tol=1e-9):
        raise NonUniformGridError(f"axis {name} is not uniform with the declared spacing")


def load_field(path) -> GriddedVelocityField:
    """Load a field from its JSON header and the per-variable CSV files beside it."""
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        g = header["grid"]
        spec = GridSpec(
            lon0=float(g["lon0"]), lat0=float(g["lat0"]),
            dlon=float(g["dlon"]), dlat=float(g["dlat"]),
            nlon=int(g["nlon"]), nlat=int(g["nlat"]),
            t0=float(g["t0"]), dt_grid=float(g["dt_grid"]), nt=int(g["nt"]),
        )
        variables = header["variables"]
        fill = float(header.get("fill_value", np.nan))
        files = {c: path.parent / variables[c]["file"] for c in ("u", "v")}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FlowFieldError):
            raise
        raise MalformedHeaderError(f"{path}: {exc}") from exc

    axes = header.get("axes", {})
    for name, start, step, n in (
        ("lon", spec.lon0, spec.dlon, spec.nlon),
        ("lat", spec.lat0, spec.dlat, spec.nlat),
        ("time", spec.t0, spec.dt_grid, spec.nt),
    ):
        if name in axes:
            _axis_check(name, axes[name], start, step, n)

    arrays = {}
    for comp, fpath in files.items():
        arr = np.full(spec.shape, np.nan)
        seen = np.zeros(spec.shape, dtype=bool)
        with open(fpath, newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head is None or tuple(h.strip() for h in head) != _CSV_COLUMNS:
                raise MalformedHeaderError(f"{fpath}: expected columns {_CSV_COLUMNS}")
            for row in reader:
                if not row:
                    continue
                try:
                    k, j, i = int(row[0]), int(row[1]), int(row[2])
                    val = float(row[3])
                except (ValueError, IndexError) as exc:
                    raise SizeMismatchError(f"{fpath}: bad row {row!r}") from exc
                if not (0 <= k < spec.nt and 0 <= j < spec.nlat and 0 <= i < spec.nlon):
                    raise SizeMismatchError(f"{fpath}: index ({k}, {j}, {i}) outside declared grid")
                arr[k, j, i] = val
                seen[k, j, i] = True
        if not seen.all():
            raise SizeMismatchError(f"{fpath}: {int((~seen).sum())} cells missing for declared grid {spec.shape}")
        if not np.isnan(fill):
            arr[arr == fill] = np.nan
        arrays[comp] = arr

    mask = np.isfinite(arrays["u"]) & np.isfinite(arrays["v"])
    return GriddedVelocityField(spec, arrays["u"], arrays["v"], mask, name=header.get("name", path.stem))


def save_field(fld: GriddedVelocityField, path, fill_value=-9999.0, units="m/s") -> Path:
    """Write ``fld`` as ``<stem>.json`` plus ``<stem>_u.csv`` and ``<stem>_v.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    header = {
        "format_version": FORMAT_VERSION,
        "name": fld.name,
        "grid": fld.spec.to_dict(),
        "variables": {
            "u": {"file": f"{stem}_u.csv", "units": units, "long_name": "eastward velocity"},
            "v": {"file": f"{stem}_v.csv", "units": units, "long_name": "northward velocity"},
        },
        "fill_value": fill_value,
    }
    path.write_text(json.dumps(header, indent=2) + "\n")
    k, j, i = np.indices(fld.spec.shape).reshape(3, -1)
    for comp, arr in (("u", fld.u), ("v", fld.v)):
        vals = np.where(fld.mask, arr, fill_value).ravel()
        with open(path.parent / f"{stem}_{comp}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_CSV_COLUMNS)
            w.writerows(zip(k.tolist(), j.tolist(), i.tolist(), (repr(float(x)) for x in vals)))
    return path
