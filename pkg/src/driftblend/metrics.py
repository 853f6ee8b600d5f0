"""Trajectory and velocity skill metrics, and test-vs-training similarity statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import signal

from .flowfield import EARTH_RADIUS


class MetricError(ValueError):
    pass


def haversine(lon1, lat1, lon2, lat2, radius=EARTH_RADIUS):
    """Great-circle distance in metres."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class SkillReport:
    drifter_id: str
    c: float
    s: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def skill_score(modeled, real) -> SkillReport:
    """Normalized cumulative separation ``c`` and skill ``s = 1 - c``.

    Sums run over samples 1..n (the shared start is excluded); ``l(t_j)`` is
    the real path length from the start to ``t_j``.
    """
    if len(modeled.times) != len(real.times) or np.any(np.asarray(modeled.times) != np.asarray(real.times)):
        raise MetricError("modeled and real trajectories must share the time axis")
    if len(real.times) < 2:
        raise MetricError("need at least two samples")
    sep = haversine(modeled.lon[1:], modeled.lat[1:], real.lon[1:], real.lat[1:])
    steps = haversine(real.lon[:-1], real.lat[:-1], real.lon[1:], real.lat[1:])
    length = np.cumsum(steps)
    denom = float(length.sum())
    if not denom > 0:
        raise MetricError("real trajectory has zero path length")
    c = float(sep.sum()) / denom
    return SkillReport(str(real.drifter_id), c, 1.0 - c, int(sep.size))


def rmse_zonal(modeled_u, real_u, u_bar) -> float:
    """RMS of the zonal velocity error scaled by ``u_bar``."""
    m = np.asarray(modeled_u, dtype=np.float64)
    r = np.asarray(real_u, dtype=np.float64)
    if m.shape != r.shape:
        raise MetricError("series lengths differ")
    if m.size == 0:
        raise MetricError("empty series")
    if not u_bar > 0:
        raise MetricError("u_bar must be positive")
    d = (m - r) / u_bar
    d = d[np.isfinite(d)]
    if d.size == 0:
        raise MetricError("no finite samples")
    return float(np.sqrt(np.mean(d * d)))


def mean_speed(velocity_series) -> float:
    """Dataset-wide mean speed of a collection of ``(n, 2)`` velocity arrays."""
    sp = np.concatenate([np.hypot(v[:, 0], v[:, 1]) for v in velocity_series])
    sp = sp[np.isfinite(sp)]
    return float(sp.mean())


def windowed_correlation(x, y, min_overlap=0.25):
    """Normalized correlation for every lag with enough overlap.

    Lag ``k`` pairs ``x[i]`` with ``y[i - k]``. Each overlapping window is
    mean-removed and scaled by its own standard deviations. Returns
    ``(lags, corr)``; windows with zero variance are omitted.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = x.size, y.size
    if nx < 2 or ny < 2:
        raise MetricError("series need at least two samples")
    lags = np.arange(-(ny - 1), nx)
    lo = np.maximum(0, lags)
    hi = np.minimum(nx, ny + lags)
    L = hi - lo
    need = max(2, int(math.ceil(min_overlap * min(nx, ny))))
    keep = L >= need
    lags, lo, hi, L = lags[keep], lo[keep], hi[keep], L[keep].astype(np.float64)

    cx = np.concatenate([[0.0], np.cumsum(x)])
    cx2 = np.concatenate([[0.0], np.cumsum(x * x)])
    cy = np.concatenate([[0.0], np.cumsum(y)])
    cy2 = np.concatenate([[0.0], np.cumsum(y * y)])
    sx = cx[hi] - cx[lo]
    sxx = cx2[hi] - cx2[lo]
    sy = cy[hi - lags] - cy[lo - lags]
    syy = cy2[hi - lags] - cy2[lo - lags]
    full = signal.correlate(x, y, mode="full", method="direct")
    sxy = full[lags + ny - 1]

    vx = sxx - sx * sx / L
    vy = syy - sy * sy / L
    scale_x = max(float(np.dot(x - x.mean(), x - x.mean())), 1e-300)
    scale_y = max(float(np.dot(y - y.mean(), y - y.mean())), 1e-300)
    ok = (vx > 1e-12 * scale_x) & (vy > 1e-12 * scale_y)
    corr = (sxy[ok] - sx[ok] * sy[ok] / L[ok]) / np.sqrt(vx[ok] * vy[ok])
    return lags[ok], np.clip(corr, -1.0, 1.0)


def max_cross_correlation(test_series, training_set, min_overlap=0.25) -> float:
    """Maximum over training series and lags of the windowed normalized correlation."""
    best = -np.inf
    for y in training_set:
        y = np.asarray(y, dtype=np.float64)
        y = y[np.isfinite(y)]
        if y.size < 2 or np.ptp(y) == 0:
            continue
        _, corr = windowed_correlation(test_series, y, min_overlap)
        if corr.size:
            best = max(best, float(corr.max()))
    if not np.isfinite(best):
        raise MetricError("no training series with non-zero variance")
    return best


WELCH_SEGMENT = 256


def mean_ms_coherence(x, y, nperseg=WELCH_SEGMENT) -> float:
    """Welch magnitude-squared coherence (Hann, 50% overlap) averaged over frequency bins.

    Series of unequal length are compared over their common leading span.
    """
    n = min(len(x), len(y))
    if n < 2 * nperseg:
        raise MetricError(f"series too short for coherence: {n} < {2 * nperseg}")
    _, cxy = signal.coherence(
        np.asarray(x[:n], dtype=np.float64), np.asarray(y[:n], dtype=np.float64),
        window="hann", nperseg=nperseg, noverlap=nperseg // 2,
    )
    return float(np.clip(np.nanmean(cxy), 0.0, 1.0))


def max_mean_ms_coherence(test_series, training_set, nperseg=WELCH_SEGMENT) -> float:
    best = -np.inf
    for y in training_set:
        if min(len(y), len(test_series)) < 2 * nperseg:
            continue
        best = max(best, mean_ms_coherence(test_series, y, nperseg))
    if not np.isfinite(best):
        raise MetricError(f"series too short for coherence: need {2 * nperseg} samples")
    return best


class NearestTrained(NamedTuple):
    km: float
    hours: float
    nearest_in_space: str
    nearest_in_time: str


def nearest_trained(test_track, training_tracks) -> NearestTrained:
    """Distance between initial positions and deployment-time gap to the nearest training drifters."""
    if not training_tracks:
        raise MetricError("empty training set")
    tr = sorted(training_tracks, key=lambda r: str(r.drifter_id))
    lon = np.array([r.lon[0] for r in tr])
    lat = np.array([r.lat[0] for r in tr])
    t = np.array([r.times[0] for r in tr])
    d = haversine(test_track.lon[0], test_track.lat[0], lon, lat) / 1000.0
    dt = np.abs(t - test_track.times[0]) / 3600.0
    i, j = int(np.argmin(d)), int(np.argmin(dt))
    return NearestTrained(float(d[i]), float(dt[j]), str(tr[i].drifter_id), str(tr[j].drifter_id))


@dataclass(frozen=True)
class SimilarityReport:
    drifter_id: str
    max_correlation: float
    max_mean_ms_coherence: float
    dist_to_trained: float
    time_to_trained: float

    def to_dict(self) -> dict:
        return asdict(self)


def similarity_report(test_track, training_tracks, nperseg=WELCH_SEGMENT) -> SimilarityReport:
    series = [np.asarray(r.u) for r in training_tracks]
    u = np.asarray(test_track.u)
    corr = max_cross_correlation(u - u.mean(), [s - s.mean() for s in series])
    try:
        coh = max_mean_ms_coherence(u, series, nperseg)
    except MetricError:
        coh = float("nan")
    near = nearest_trained(test_track, training_tracks)
    return SimilarityReport(str(test_track.drifter_id), corr, coh, near.km, near.hours)


def histogram(values, bin_edges):
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values[np.isfinite(values)], bins=bin_edges)
    return counts, edges
