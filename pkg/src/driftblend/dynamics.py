"""Inertial drifter dynamics: the full relaxation system and its slow-manifold reduction.

All functions work in any consistent unit system. ``DrifterParams.T`` is the
time scale that turns the nondimensional ``eps`` into the drag response time
``eps * T``; use ``T = 1`` for nondimensional flows and ``T = L / U`` (s) for
dimensional ones. The slip hook ``H(u_e, u)`` returns a velocity in the same
units as ``u``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .flowfield import FlowSample, coriolis_parameter  # noqa: F401  (re-exported)


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalDrifterParams:
    rho_p: float = 1025.0
    rho_f: float = 1025.0
    rho_a: float = 1.2
    nu_f: float = 1.0e-6
    nu_a: float = 1.5e-5
    a: float = 0.05
    alpha: float = 0.0
    g: float = 9.81

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k == "alpha":
                if v < 0:
                    raise DynamicsError("alpha must be non-negative")
            elif not v > 0:
                raise DynamicsError(f"{k} must be positive")


@dataclass(frozen=True)
class DrifterParams:
    R: float
    St: float
    mu: float
    eps: float
    delta_p: float
    delta_a: float
    L: float = 1.0
    U: float = 1.0
    T: float = 1.0

    @classmethod
    def from_eps(cls, eps, R=2.0 / 3.0, delta_p=None, delta_a=0.0, L=1.0, U=1.0):
        """Build parameters directly from ``eps`` and ``R``; ``delta_p`` defaults to the value implied by R."""
        if delta_p is None:
            delta_p = (2.0 / R - 1.0) / 2.0
        St = eps * R
        mu = np.inf if eps == 0 else 1.0 / eps
        return cls(R=R, St=St, mu=mu, eps=eps, delta_p=delta_p, delta_a=delta_a, L=L, U=U, T=L / U)

    @property
    def response_time(self) -> float:
        """Drag response time ``eps * T`` in the time unit of ``T``."""
        return self.eps * self.T

    def to_dict(self) -> dict:
        return asdict(self)


def nondimensionalize(p: PhysicalDrifterParams, L: float, U: float) -> DrifterParams:
    if not (L > 0 and U > 0):
        raise DynamicsError("length and velocity scales must be positive")
    R = 2.0 * p.rho_f / (p.rho_f + 2.0 * p.rho_p)
    Re = U * L / p.nu_f
    St = (2.0 / 9.0) * (p.a / L) ** 2 * Re
    mu = R / St
    return DrifterParams(
        R=R, St=St, mu=mu, eps=1.0 / mu,
        delta_p=p.rho_p / p.rho_f, delta_a=p.rho_a / p.rho_f,
        L=L, U=U, T=L / U,
    )


def perp(u):
    """Rotate by +90 degrees: (u1, u2) -> (-u2, u1)."""
    u = np.asarray(u, dtype=np.float64)
    return np.stack([-u[..., 1], u[..., 0]], axis=-1)


def zero_slip(u_e, u):
    return np.zeros_like(np.asarray(u, dtype=np.float64))


def reduced_velocity(sample: FlowSample, params: DrifterParams, slip=None):
    """Leading-order slow-manifold drifter velocity for an already-sampled flow.

    ``u + eps*T*[(3R/2 - 1) Du/Dt - R f (delta_p - 1) u_perp] + H(u_e, u)``
    """
    u = sample.u
    tau = params.response_time
    R = params.R
    f = np.asarray(sample.f, dtype=np.float64)[..., None]
    corr = (1.5 * R - 1.0) * sample.dudt - R * f * (params.delta_p - 1.0) * perp(u)
    v = u + tau * corr
    if slip is not None:
        v = v + slip(sample.u_e, u)
    return v


def reduced_mr_velocity(flow, params: DrifterParams, lon, lat, t, slip=None):
    """Reduced drifter velocity at positions; ``flow`` has ``sample(lon, lat, t)``.

    Points where the flow is undefined come back as NaN.
    """
    return reduced_velocity(flow.sample(lon, lat, t), params, slip)


def full_mr_accel(v, sample: FlowSample, params: DrifterParams, slip=None, wind_drag=0.0):
    """Drifter acceleration of the unreduced system (gravity dropped in 2D).

    ``dv/dt = (u - v + H)/(eps*T) + (3R/2) Du/Dt - R f (delta_p v - u)_perp
    - R delta_a k_a (v - u_wind)`` with ``k_a = nu_a * alpha`` (``wind_drag``).
    """
    tau = params.response_time
    if not tau > 0:
        raise DynamicsError("full system requires eps > 0")
    v = np.asarray(v, dtype=np.float64)
    u = sample.u
    R = params.R
    f = np.asarray(sample.f, dtype=np.float64)[..., None]
    forcing = u - v
    if slip is not None:
        forcing = forcing + slip(sample.u_e, u)
    acc = forcing / tau + 1.5 * R * sample.dudt - R * f * perp(params.delta_p * v - u)
    if wind_drag:
        acc = acc - R * params.delta_a * wind_drag * (v - sample.u_wind)
    return acc


def full_mr_rhs(x, v, t, flow, params: DrifterParams, slip=None, wind_drag=0.0):
    """Right-hand side ``(dx/dt, dv/dt)`` for planar positions ``x`` (flow sampled at x, t)."""
    x = np.asarray(x, dtype=np.float64)
    sample = flow.sample(x[..., 0], x[..., 1], t)
    return np.asarray(v, dtype=np.float64), full_mr_accel(v, sample, params, slip, wind_drag)


class PlanarFlow:
    """Adapter exposing an analytic field on flat coordinates as a flow context.

    No wind, constant Coriolis parameter ``f``; used by the convergence checks.
    """

    def __init__(self, field, f=0.0):
        self.field = field
        self.f = f

    def sample(self, x, y, t):
        from .flowfield import analytic_sample

        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        pos = np.stack([x, y], axis=-1)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape)
        u, dudt = analytic_sample(self.field, pos, t)
        zero = np.zeros_like(u)
        return FlowSample(u, zero, zero, dudt, np.full(x.shape, float(self.f)), np.ones(x.shape, dtype=bool))


def integrate_full_planar(flow, params: DrifterParams, x0, v0, t0, t1, dt, slip=None, wind_drag=0.0):
    """Classical RK4 integration of the full system on flat coordinates.

    Returns ``(times, x, v)`` with arrays of shape ``(n+1, ..., 2)``.
    """
    n = int(round((t1 - t0) / dt))
    x = np.array(x0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    xs, vs = [x.copy()], [v.copy()]
    t = t0
    for _ in range(n):
        k1x, k1v = full_mr_rhs(x, v, t, flow, params, slip, wind_drag)
        k2x, k2v = full_mr_rhs(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v, t + 0.5 * dt, flow, params, slip, wind_drag)
        k3x, k3v = full_mr_rhs(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v, t + 0.5 * dt, flow, params, slip, wind_drag)
        k4x, k4v = full_mr_rhs(x + dt * k3x, v + dt * k3v, t + dt, flow, params, slip, wind_drag)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        t = t0 + (len(xs)) * dt
        xs.append(x.copy())
        vs.append(v.copy())
    return t0 + dt * np.arange(n + 1), np.array(xs), np.array(vs)
