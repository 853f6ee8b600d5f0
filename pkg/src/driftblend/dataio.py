"""Drifter tracks: CSV ingestion, 15-minute resampling, train/test splits and synthetic truth."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import flowfield as ff
from .dynamics import DrifterParams, PhysicalDrifterParams, full_mr_accel, nondimensionalize, reduced_velocity
from .integrate import degree_rates, iso_time, parse_iso_time
from .metrics import haversine

log = logging.getLogger(__name__)

CADENCE = 900.0
MAX_GAP = 6 * 3600.0
DRIFTER_COLUMNS = ("drifter_id", "iso_time", "lon", "lat", "u_mps", "v_mps", "drogue")


class DataError(ValueError):
    pass


@dataclass
class DrifterRecord:
    drifter_id: str
    times: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    u: np.ndarray
    v: np.ndarray
    drogue_lost_time: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        for k in ("lon", "lat", "u", "v"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=np.float64))
        if np.any(np.diff(self.times) <= 0):
            raise DataError(f"drifter {self.drifter_id}: timestamps not strictly increasing")

    def __len__(self):
        return self.times.size

    @property
    def deployment_time(self) -> float:
        return float(self.times[0])

    @property
    def deployment_position(self) -> tuple[float, float]:
        return float(self.lon[0]), float(self.lat[0])

    @property
    def status(self) -> np.ndarray:
        return np.zeros(self.times.size, dtype=np.int8)


# ---------------------------------------------------------------- CSV


def load_drifters(path) -> list[DrifterRecord]:
    """Parse a drifter CSV; samples from the first undrogued one onward are dropped."""
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = [c for c in DRIFTER_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for r in reader:
            rows.setdefault(r["drifter_id"], []).append(r)

    records = []
    for did in sorted(rows):
        rs = rows[did]
        try:
            t = np.array([parse_iso_time(r["iso_time"]) for r in rs])
            vals = np.array([[float(r[c]) for c in ("lon", "lat", "u_mps", "v_mps")] for r in rs])
            drogue = np.array([int(r["drogue"]) for r in rs])
        except ValueError as exc:
            raise DataError(f"{path}: drifter {did}: {exc}") from exc
        if np.any(np.diff(t) <= 0):
            raise DataError(f"{path}: drifter {did}: timestamps out of order")
        if not np.isfinite(vals[:, 2:]).all():
            raise DataError(f"{path}: drifter {did}: non-finite velocity")
        lost = np.flatnonzero(drogue == 0)
        lost_time = None
        if lost.size:
            lost_time = float(t[lost[0]])
            keep = t < lost_time
            t, vals = t[keep], vals[keep]
        if t.size == 0:
            log.info("drifter %s has no drogued samples; skipped", did)
            continue
        records.append(DrifterRecord(did, t, vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3], lost_time))
    return records


def write_drifters(records, path, comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(DRIFTER_COLUMNS)
        for rec in records:
            for i in range(len(rec)):
                w.writerow(
                    [rec.drifter_id, iso_time(rec.times[i]), repr(float(rec.lon[i])), repr(float(rec.lat[i])),
                     repr(float(rec.u[i])), repr(float(rec.v[i])), 1]
                )
    return path


# ---------------------------------------------------------------- resampling


def resample_15min(record: DrifterRecord, cadence=CADENCE, max_gap=MAX_GAP) -> list[DrifterRecord]:
    """Linear interpolation onto a uniform axis; gaps longer than ``max_gap`` split the record.

    Segments after the first get ``_s<k>`` suffixes. Segments too short to
    hold two samples are dropped.
    """
    if len(record) < 2:
        raise DataError(f"drifter {record.drifter_id}: need at least two samples")
    t = record.times
    breaks = np.flatnonzero(np.diff(t) > max_gap) + 1
    bounds = np.split(np.arange(t.size), breaks)
    out = []
    for k, idx in enumerate(bounds):
        ts = t[idx]
        n = int(math.floor((ts[-1] - ts[0]) / cadence + 1e-9)) + 1
        if n < 2:
            log.info("drifter %s: segment %d too short after resampling; dropped", record.drifter_id, k)
            continue
        grid = ts[0] + cadence * np.arange(n)
        seg_id = record.drifter_id if k == 0 else f"{record.drifter_id}_s{k}"
        interp = [np.interp(grid, ts, getattr(record, c)[idx]) for c in ("lon", "lat", "u", "v")]
        out.append(DrifterRecord(seg_id, grid, *interp, drogue_lost_time=record.drogue_lost_time))
    if len(bounds) > 1:
        log.info("drifter %s split into %d segments at gaps > %.0f s", record.drifter_id, len(out), max_gap)
    return out


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "random"
    test_fraction: float = 0.2
    rng_seed: int = 0
    cluster_radius_km: float = 2.0
    cluster_window_hours: float = 2.0

    def __post_init__(self):
        if self.mode not in ("random", "non_repetitive"):
            raise DataError(f"unknown split mode {self.mode!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError("test_fraction must be in (0, 1)")


@dataclass
class Split:
    train: list
    test: list
    spec: SplitSpec
    clusters: list[list[str]] = field(default_factory=list)

    @property
    def train_ids(self) -> list[str]:
        return [r.drifter_id for r in self.train]

    @property
    def test_ids(self) -> list[str]:
        return [r.drifter_id for r in self.test]

    def manifest(self) -> dict:
        m = {
            "spec": asdict(self.spec),
            "train": self.train_ids,
            "test": self.test_ids,
        }
        if self.spec.mode == "non_repetitive":
            m["clusters"] = self.clusters
            m["note"] = "clusters from single-linkage on deployment distance and time; approximates a hand-curated split"
        return m


def deployment_clusters(records, radius_km, window_hours) -> list[list[int]]:
    """Single-linkage clusters: deployments linked when both close in space and in time."""
    n = len(records)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    lon = np.array([r.deployment_position[0] for r in records])
    lat = np.array([r.deployment_position[1] for r in records])
    t = np.array([r.deployment_time for r in records])
    for i in range(n):
        d = haversine(lon[i], lat[i], lon[i + 1 :], lat[i + 1 :]) / 1000.0
        close = (d <= radius_km) & (np.abs(t[i + 1 :] - t[i]) <= window_hours * 3600.0)
        for j in np.flatnonzero(close) + i + 1:
            ri, rj = find(i), find(int(j))
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def split(records, spec: SplitSpec) -> Split:
    """Random or cluster-preserving (non-repetitive) train/test split by drifter."""
    records = sorted(records, key=lambda r: r.drifter_id)
    n = len(records)
    if n < 2:
        raise DataError("need at least two records to split")
    rng = np.random.default_rng(spec.rng_seed)
    n_test = min(max(int(round(spec.test_fraction * n)), 1), n - 1)

    if spec.mode == "random":
        test_idx = set(rng.permutation(n)[:n_test].tolist())
        clusters = []
    else:
        groups = deployment_clusters(records, spec.cluster_radius_km, spec.cluster_window_hours)
        order = rng.permutation(len(groups))
        # largest first; seeded shuffle breaks ties between equal sizes
        ranked = sorted(order.tolist(), key=lambda g: -len(groups[g]))
        test_idx: set[int] = set()
        for g in ranked:
            if len(test_idx) + len(groups[g]) <= n_test:
                test_idx.update(groups[g])
            if len(test_idx) == n_test:
                break
        slack = max(1, int(round(0.1 * n_test)))
        if abs(len(test_idx) - n_test) > slack or len(test_idx) == 0 or len(test_idx) == n:
            sizes = sorted((len(g) for g in groups), reverse=True)
            raise DataError(
                f"cluster structure cannot meet test fraction {spec.test_fraction}: wanted {n_test} test drifters, "
                f"reached {len(test_idx)}; cluster sizes {sizes}"
            )
        clusters = [[records[i].drifter_id for i in g] for g in groups]
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return Split(train, test, spec, clusters)


# ---------------------------------------------------------------- synthetic truth


def ekman_slip(ue_coeff=0.05, u_coeff=0.02):
    """Linear slip ``H(u_e, u) = ue_coeff * u_e + u_coeff * u`` (m/s)."""

    def slip(u_e, u):
        return ue_coeff * u_e + u_coeff * u

    slip.coefficients = (ue_coeff, u_coeff)
    return slip


@dataclass
class SynthConfig:
    seed: int = 0
    n_clusters: int = 16
    per_cluster: int = 4
    duration_days: float = 10.0
    deploy_window_days: float = 2.0
    cluster_spread_m: float = 1000.0
    t0: float = 1453334400.0  # 2016-01-21T00:00:00Z
    # domain and coarse grids
    lon_min: float = -96.0
    lon_max: float = -84.0
    lat_min: float = 22.0
    lat_max: float = 31.0
    grid_step_deg: float = 0.25
    current_dt_hours: float = 24.0
    wind_dt_hours: float = 6.0
    box_subsamples: int = 4
    # analytic current: double gyre placed with its lower-left corner at the origin
    origin_lon: float = -95.0
    origin_lat: float = 23.0
    gyre_amplitude: float = 0.1
    gyre_eps: float = 0.1
    gyre_period_days: float = 10.0
    gyre_scale_m: float = 450_000.0
    # analytic wind
    wind_base: tuple[float, float] = (2.0, 1.0)
    wind_amplitude: float = 6.0
    wind_period_days: float = 3.0
    wind_wavelength_m: float = 1_500_000.0
    # drifter physics
    rho_p: float = 1030.0
    rho_f: float = 1025.0
    drogue_radius: float = 0.05
    length_scale: float = 1.0e4
    velocity_scale: float = 0.5
    wind_drag: float = 0.0
    slip_ue: float = 0.05
    slip_u: float = 0.02
    substeps_per_cadence: int = 0  # 0: choose from the drag response time
    min_days: float = 2.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wind_base"] = list(self.wind_base)
        return d

    def physical(self) -> PhysicalDrifterParams:
        return PhysicalDrifterParams(rho_p=self.rho_p, rho_f=self.rho_f, a=self.drogue_radius)

    def params(self) -> DrifterParams:
        return nondimensionalize(self.physical(), self.length_scale, self.velocity_scale)

    def current_field(self) -> ff.AnalyticField:
        return ff.DoubleGyre(
            self.gyre_amplitude, self.gyre_eps, 2 * math.pi / (self.gyre_period_days * 86400.0), self.gyre_scale_m
        )

    def wind_field(self) -> ff.AnalyticField:
        k = 2 * math.pi / self.wind_wavelength_m
        return ff.RotatingStream(
            tuple(self.wind_base), self.wind_amplitude, 2 * math.pi / (self.wind_period_days * 86400.0), kx=k, ky=0.5 * k
        )

    def truth_flow(self) -> ff.AnalyticFlow:
        return ff.AnalyticFlow(
            self.current_field(), self.wind_field(), (self.origin_lon, self.origin_lat),
            bounds=self.interior_bounds(),
        )

    def interior_bounds(self):
        # keep two coarse cells clear of the grid edge so cubic support and derivatives exist
        m = 2 * self.grid_step_deg
        return (self.lon_min + m, self.lon_max - m, self.lat_min + m, self.lat_max - m)


@dataclass
class SyntheticDataset:
    records: list[DrifterRecord]
    current: ff.GriddedVelocityField
    wind: ff.GriddedVelocityField
    params: DrifterParams
    config: SynthConfig
    truth: ff.AnalyticFlow

    def flow(self, fallback=False) -> ff.GriddedFlow:
        return ff.GriddedFlow(self.current, self.wind, fallback)


def box_average_field(fld: ff.AnalyticField, flow: ff.AnalyticFlow, spec: ff.GridSpec, n_sub: int, name: str):
    """Grid an analytic field by averaging ``n_sub x n_sub`` midpoint samples over each cell box."""
    off = (np.arange(n_sub) + 0.5) / n_sub - 0.5
    lon_s = (spec.lons[:, None] + off[None, :] * spec.dlon).ravel()
    lat_s = (spec.lats[:, None] + off[None, :] * spec.dlat).ravel()
    LAT, LON = np.meshgrid(lat_s, lon_s, indexing="ij")
    x, y = flow.to_local(LON, LAT)
    u = np.empty(spec.shape)
    v = np.empty(spec.shape)
    for k, t in enumerate(spec.times):
        vel = fld.velocity(x, y, t)
        vel = vel.reshape(spec.nlat, n_sub, spec.nlon, n_sub, 2).mean(axis=(1, 3))
        u[k], v[k] = vel[..., 0], vel[..., 1]
    return ff.GriddedVelocityField(spec, u, v, np.ones(spec.shape, dtype=bool), name=name)


def _deployments(cfg: SynthConfig, rng):
    """Clustered deployment positions and times on the cadence grid."""
    n = cfg.n_clusters * cfg.per_cluster
    gs = cfg.gyre_scale_m
    # cluster centres inside the gyre interior, away from the separatrix and walls
    cx = rng.uniform(0.12, 0.88, cfg.n_clusters) * gs + rng.integers(0, 2, cfg.n_clusters) * gs
    cy = rng.uniform(0.15, 0.85, cfg.n_clusters) * gs
    window = int(cfg.deploy_window_days * 86400.0 / CADENCE)
    ct = rng.integers(0, max(window, 1), cfg.n_clusters)
    lon0, lat0 = cfg.origin_lon, cfg.origin_lat
    coslat = math.cos(math.radians(lat0))
    pos, times = [], []
    for k in range(cfg.n_clusters):
        for _ in range(cfg.per_cluster):
            r = cfg.cluster_spread_m * math.sqrt(rng.random())
            a = 2 * math.pi * rng.random()
            x = cx[k] + r * math.cos(a)
            y = cy[k] + r * math.sin(a)
            pos.append((lon0 + x / (ff.M_PER_DEG * coslat), lat0 + y / ff.M_PER_DEG))
            times.append(cfg.t0 + CADENCE * (ct[k] + int(rng.integers(0, 4))))
    return np.array(pos).reshape(n, 2), np.array(times)


def generate_synthetic_truth(cfg: SynthConfig) -> SyntheticDataset:
    """Integrate the full inertial drifter system with a known slip on analytic fields.

    Drifters start on the slow manifold (reduced velocity plus slip) at their
    deployment time and are recorded every 15 minutes. Tracks leaving the
    interior of the exported grid are cut there; tracks shorter than
    ``cfg.min_days`` are dropped.
    """
    rng = np.random.default_rng(cfg.seed)
    params = cfg.params()
    tau_p = params.response_time
    if not tau_p > 0:
        raise DataError("synthetic truth needs eps > 0")
    sub = cfg.substeps_per_cadence or int(math.ceil(10.0 * CADENCE / tau_p))
    if CADENCE / sub > tau_p / 10.0 * (1 + 1e-9):
        raise DataError(f"{sub} substeps per 15 min is unstable for a drag response time of {tau_p:.1f} s")
    if sub > 2000:
        raise DataError(f"drag response time {tau_p:.3g} s needs {sub} substeps per 15 min; refusing")
    slip = ekman_slip(cfg.slip_ue, cfg.slip_u)
    truth = cfg.truth_flow()

    pos, t_dep = _deployments(cfg, rng)
    n = pos.shape[0]
    n_out = int(round(cfg.duration_days * 86400.0 / CADENCE))
    t_start = float(t_dep.min())
    steps_total = int(round((t_dep.max() - t_start) / CADENCE)) + n_out
    first = np.rint((t_dep - t_start) / CADENCE).astype(int)

    lon = pos[:, 0].copy()
    lat = pos[:, 1].copy()
    v = np.zeros((n, 2))
    alive = np.ones(n, dtype=bool)
    started = np.zeros(n, dtype=bool)
    out = np.full((steps_total + 1, n, 4), np.nan)
    dt = CADENCE / sub

    def rhs(lo, la, vv, t):
        s = truth.sample(lo, la, t)
        acc = full_mr_accel(vv, s, params, slip, cfg.wind_drag)
        dlon, dlat = degree_rates(vv, la)
        return dlon, dlat, acc, s.valid

    for k in range(steps_total + 1):
        t = t_start + k * CADENCE
        new = (first == k) & ~started
        if new.any():
            s = truth.sample(lon[new], lat[new], t)
            v[new] = reduced_velocity(s, params, slip)
            started |= new
        rec = started & alive
        out[k, rec, 0], out[k, rec, 1] = lon[rec], lat[rec]
        out[k, rec, 2:] = v[rec]
        if k == steps_total:
            break
        act = started & alive
        if not act.any():
            continue
        lo, la, vv = lon[act], lat[act], v[act]
        ok = np.ones(lo.size, dtype=bool)
        for j in range(sub):
            tt = t + j * dt
            a1, b1, c1, ok1 = rhs(lo, la, vv, tt)
            a2, b2, c2, ok2 = rhs(lo + 0.5 * dt * a1, la + 0.5 * dt * b1, vv + 0.5 * dt * c1, tt + 0.5 * dt)
            a3, b3, c3, ok3 = rhs(lo + 0.5 * dt * a2, la + 0.5 * dt * b2, vv + 0.5 * dt * c2, tt + 0.5 * dt)
            a4, b4, c4, ok4 = rhs(lo + dt * a3, la + dt * b3, vv + dt * c3, tt + dt)
            ok &= ok1 & ok2 & ok3 & ok4
            lo = lo + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
            la = la + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
            vv = vv + dt / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4)
        idx = np.flatnonzero(act)
        lon[idx], lat[idx], v[idx] = lo, la, vv
        alive[idx[~ok]] = False

    records = []
    min_len = int(cfg.min_days * 86400.0 / CADENCE) + 1
    width = len(str(n - 1))
    for i in range(n):
        rows = out[first[i] : first[i] + n_out + 1, i]
        good = np.isfinite(rows).all(axis=1)
        stop = int(np.argmin(good)) if not good.all() else good.size
        if stop < min_len:
            log.info("synthetic drifter %d left the domain after %d samples; dropped", i, stop)
            continue
        rows = rows[:stop]
        times = t_dep[i] + CADENCE * np.arange(stop)
        records.append(DrifterRecord(f"D{i:0{width}d}", times, rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]))

    t_lo = t_start - 86400.0
    t_hi = t_start + steps_total * CADENCE + 86400.0
    current = box_average_field(cfg.current_field(), truth, _grid(cfg, t_lo, t_hi, cfg.current_dt_hours), cfg.box_subsamples, "current")
    wind = box_average_field(cfg.wind_field(), truth, _grid(cfg, t_lo, t_hi, cfg.wind_dt_hours), cfg.box_subsamples, "wind10")
    return SyntheticDataset(records, current, wind, params, cfg, truth)


def _grid(cfg: SynthConfig, t_lo, t_hi, dt_hours) -> ff.GridSpec:
    step = cfg.grid_step_deg
    dtg = dt_hours * 3600.0
    k0 = math.floor((t_lo - cfg.t0) / dtg)
    k1 = math.ceil((t_hi - cfg.t0) / dtg)
    return ff.GridSpec(
        lon0=cfg.lon_min, lat0=cfg.lat_min, dlon=step, dlat=step,
        nlon=int(round((cfg.lon_max - cfg.lon_min) / step)) + 1,
        nlat=int(round((cfg.lat_max - cfg.lat_min) / step)) + 1,
        t0=cfg.t0 + k0 * dtg, dt_grid=dtg, nt=k1 - k0 + 1,
    )
