"""RK4 advection on the sphere, ensemble seeding and median trajectories.

A velocity model is any callable ``model(lon, lat, t)`` returning ``(N, 2)``
velocities in m/s, optionally together with an ``(N,)`` status array. NaN
velocities mark points where the model is undefined. Models that keep
per-member memory may also define ``step_begin(lon, lat, t, active)``,
called once at every output sample before the RK4 stages.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .flowfield import M_PER_DEG

OK = 0
LEFT_DOMAIN = 1
MASKED_FLOW = 2
STATUS_NAMES = {OK: "ok", LEFT_DOMAIN: "left_domain", MASKED_FLOW: "masked_flow"}
STATUS_CODES = {v: k for k, v in STATUS_NAMES.items()}

DEFAULT_DT = 900.0
MAX_SEED_RADIUS = 10_000.0


class IntegrationError(ValueError):
    pass


@dataclass
class Trajectory:
    drifter_id: str
    times: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    u: np.ndarray
    v: np.ndarray
    status: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        n = self.times.size
        for name in ("lon", "lat", "u", "v"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise IntegrationError(f"{name} must have length {n}")
            setattr(self, name, arr)
        self.status = np.asarray(self.status, dtype=np.int8)
        if self.status.shape != (n,):
            raise IntegrationError(f"status must have length {n}")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise IntegrationError("times must be strictly increasing")

    def __len__(self):
        return self.times.size

    @property
    def positions(self) -> np.ndarray:
        return np.stack([self.lon, self.lat], axis=-1)

    @property
    def velocities(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    @property
    def ok(self) -> np.ndarray:
        return self.status == OK


def _call(model, lon, lat, t):
    out = model(lon, lat, t)
    if isinstance(out, tuple):
        vel, status = out
        status = np.asarray(status, dtype=np.int8).copy()
    else:
        vel = out
        status = np.zeros(np.shape(lon), dtype=np.int8)
    vel = np.asarray(vel, dtype=np.float64).reshape(-1, 2)
    bad = ~np.isfinite(vel).all(axis=1)
    status[bad & (status == OK)] = LEFT_DOMAIN
    return vel, status


def degree_rates(vel, lat):
    """Convert (east, north) m/s to (dlon/dt, dlat/dt) in degrees per second."""
    dlon = vel[:, 0] / (M_PER_DEG * np.cos(np.radians(lat)))
    dlat = vel[:, 1] / M_PER_DEG
    return dlon, dlat


def rk4_step(model, lon, lat, t, dt):
    """One classical RK4 step for arrays of positions.

    Returns ``(lon, lat, status)``; members whose stage evaluation failed keep
    their start position and carry the failing status.
    """
    lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
    lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    status = np.zeros(lon.shape, dtype=np.int8)

    def stage(x, y, tt):
        vel, st = _call(model, x, y, tt)
        np.copyto(status, st, where=(status == OK) & (st != OK))
        return degree_rates(vel, y)

    k1x, k1y = stage(lon, lat, t)
    k2x, k2y = stage(lon + 0.5 * dt * k1x, lat + 0.5 * dt * k1y, t + 0.5 * dt)
    k3x, k3y = stage(lon + 0.5 * dt * k2x, lat + 0.5 * dt * k2y, t + 0.5 * dt)
    k4x, k4y = stage(lon + dt * k3x, lat + dt * k3y, t + dt)
    new_lon = lon + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    new_lat = lat + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
    failed = status != OK
    new_lon[failed] = lon[failed]
    new_lat[failed] = lat[failed]
    return new_lon, new_lat, status


def integrate_ensemble(model, starts, t0, n_steps, dt=DEFAULT_DT, ids=None) -> list[Trajectory]:
    """Integrate all members together; member state never mixes across rows.

    ``t0`` may be a scalar or one start time per member. Once a member fails
    it is frozen and every later sample keeps the failing status.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    m = starts.shape[0]
    per_member = np.ndim(t0) > 0
    t0 = np.broadcast_to(np.asarray(t0, dtype=np.float64), (m,)) if per_member else float(t0)
    if ids is None:
        ids = [f"m{i:03d}" for i in range(m)]
    lon = np.empty((n_steps + 1, m))
    lat = np.empty((n_steps + 1, m))
    vel = np.full((n_steps + 1, m, 2), np.nan)
    status = np.zeros((n_steps + 1, m), dtype=np.int8)
    lon[0], lat[0] = starts[:, 0], starts[:, 1]
    alive = np.ones(m, dtype=bool)
    hook = getattr(model, "step_begin", None)

    for n in range(n_steps + 1):
        t = t0 + n * dt
        if hook is not None:
            hook(lon[n], lat[n], t, alive.copy())
        v_n, st = _call(model, lon[n], lat[n], t)
        newly_bad = alive & (st != OK)
        status[n][newly_bad] = st[newly_bad]
        alive &= ~newly_bad
        vel[n][alive] = v_n[alive]
        if n == n_steps:
            break
        # every row is stepped so row i always means member i for stateful models
        nl, nla, st2 = rk4_step(model, lon[n], lat[n], t, dt)
        lon[n + 1] = np.where(alive, nl, lon[n])
        lat[n + 1] = np.where(alive, nla, lat[n])
        status[n + 1] = np.where(alive, st2, status[n])
        alive &= st2 == OK

    steps = dt * np.arange(n_steps + 1)
    return [
        Trajectory(ids[i], (t0[i] if per_member else t0) + steps, lon[:, i], lat[:, i], vel[:, i, 0], vel[:, i, 1],
                   status[:, i])
        for i in range(m)
    ]


def integrate_trajectory(model, start, t0, n_steps, dt=DEFAULT_DT, drifter_id="model") -> Trajectory:
    return integrate_ensemble(model, [start], t0, n_steps, dt, ids=[drifter_id])[0]


@dataclass(frozen=True)
class EnsembleSpec:
    center: tuple[float, float]
    radius: float
    count: int
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.radius < MAX_SEED_RADIUS:
            raise IntegrationError(f"ensemble radius must be in [0, {MAX_SEED_RADIUS:.0f}) m")
        if self.count < 1:
            raise IntegrationError("ensemble needs at least one member")


def seed_ensemble(spec: EnsembleSpec) -> np.ndarray:
    """Area-uniform points in a disk around ``spec.center``; ``(count, 2)`` lon/lat."""
    rng = np.random.default_rng(spec.rng_seed)
    u1 = rng.random(spec.count)
    u2 = rng.random(spec.count)
    r = spec.radius * np.sqrt(u1)
    ang = 2.0 * math.pi * u2
    lon0, lat0 = spec.center
    dlon = r * np.cos(ang) / (M_PER_DEG * math.cos(math.radians(lat0)))
    dlat = r * np.sin(ang) / M_PER_DEG
    return np.stack([lon0 + dlon, lat0 + dlat], axis=-1)


def median_trajectory(ensemble: list[Trajectory], drifter_id="median") -> Trajectory:
    """Componentwise median over members that are ok at each time.

    Samples where fewer than half of the members are ok are flagged with the
    most common failure status among the members.
    """
    if not ensemble:
        raise IntegrationError("empty ensemble")
    times = ensemble[0].times
    for tr in ensemble[1:]:
        if tr.times.shape != times.shape or np.any(tr.times != times):
            raise IntegrationError("ensemble members must share the time axis")
    lon = np.stack([tr.lon for tr in ensemble])
    lat = np.stack([tr.lat for tr in ensemble])
    u = np.stack([tr.u for tr in ensemble])
    v = np.stack([tr.v for tr in ensemble])
    st = np.stack([tr.status for tr in ensemble])
    ok = st == OK
    any_ok = ok.any(axis=0)
    use = np.where(any_ok[None, :], ok, True)

    def med(a):
        return np.nanmedian(np.where(use, a, np.nan), axis=0)

    n_ok = ok.sum(axis=0)
    status = np.zeros(times.size, dtype=np.int8)
    short = 2 * n_ok < len(ensemble)
    if short.any():
        worst = np.where(st == MASKED_FLOW, MASKED_FLOW, LEFT_DOMAIN)
        masked_votes = (worst == MASKED_FLOW) & ~ok
        left_votes = (worst == LEFT_DOMAIN) & ~ok
        status[short] = np.where(masked_votes.sum(0) > left_votes.sum(0), MASKED_FLOW, LEFT_DOMAIN)[short]
    with np.errstate(all="ignore"):
        mu, mv = med(u), med(v)
    return Trajectory(drifter_id, times, med(lon), med(lat), mu, mv, status)


# ---------------------------------------------------------------- output


def iso_time(t: float) -> str:
    return datetime.fromtimestamp(float(t), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_iso_time(s: str) -> float:
    s = s.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


TRAJECTORY_COLUMNS = ("drifter_id", "iso_time", "lon", "lat", "u", "v", "status")


def write_trajectories_csv(trajectories, path, comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for tr in trajectories:
            for i in range(len(tr)):
                w.writerow(
                    [tr.drifter_id, iso_time(tr.times[i]), repr(float(tr.lon[i])), repr(float(tr.lat[i])),
                     repr(float(tr.u[i])), repr(float(tr.v[i])), STATUS_NAMES[int(tr.status[i])]]
                )
    return path


def read_trajectories_csv(path) -> list[Trajectory]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in reader:
            rows.setdefault(r["drifter_id"], []).append(r)
    out = []
    for did, rs in rows.items():
        out.append(
            Trajectory(
                did,
                [parse_iso_time(r["iso_time"]) for r in rs],
                [float(r["lon"]) for r in rs],
                [float(r["lat"]) for r in rs],
                [float(r["u"]) for r in rs],
                [float(r["v"]) for r in rs],
                [STATUS_CODES[r["status"]] for r in rs],
            )
        )
    return out


def trajectories_geojson(trajectories, properties: dict | None = None) -> dict:
    feats = []
    for tr in trajectories:
        coords = [[float(a), float(b)] for a, b in zip(tr.lon, tr.lat) if np.isfinite(a) and np.isfinite(b)]
        feats.append(
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords},
                "properties": {
                    "drifter_id": tr.drifter_id,
                    "start_time": iso_time(tr.times[0]),
                    "end_time": iso_time(tr.times[-1]),
                    "n_ok": int(tr.ok.sum()),
                    **(properties or {}),
                },
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def write_geojson(trajectories, path, properties: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trajectories_geojson(trajectories, properties)) + "\n")
    return path
