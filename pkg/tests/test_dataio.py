import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftblend import dataio
from driftblend.flowfield import ekman_velocity
from driftblend.integrate import iso_time

HEADER = "drifter_id,iso_time,lon,lat,u_mps,v_mps,drogue\n"
T0 = 1453334400.0


def csv_rows(did, n, t0=T0, drogue=None, lon0=-90.0, step=900.0):
    drogue = drogue or [1] * n
    return "".join(
        f"{did},{iso_time(t0 + step * i)},{lon0 + 0.01 * i},{25.0 + 0.005 * i},0.1,0.05,{drogue[i]}\n" for i in range(n)
    )


def test_empty_file_gives_empty_list(tmp_path):
    (tmp_path / "d.csv").write_text(HEADER)
    assert dataio.load_drifters(tmp_path / "d.csv") == []


def test_three_drifters_with_counts(tmp_path):
    (tmp_path / "d.csv").write_text("# provenance line\n" + HEADER + csv_rows("a", 4) + csv_rows("b", 7) + csv_rows("c", 2))
    recs = dataio.load_drifters(tmp_path / "d.csv")
    assert [r.drifter_id for r in recs] == ["a", "b", "c"]
    assert [len(r) for r in recs] == [4, 7, 2]


def test_drogue_loss_truncates(tmp_path):
    (tmp_path / "d.csv").write_text(HEADER + csv_rows("a", 6, drogue=[1, 1, 1, 0, 1, 0]))
    (rec,) = dataio.load_drifters(tmp_path / "d.csv")
    assert len(rec) == 3
    assert rec.drogue_lost_time == pytest.approx(T0 + 3 * 900.0)


def test_missing_column(tmp_path):
    (tmp_path / "d.csv").write_text("drifter_id,iso_time,lon,lat\n")
    with pytest.raises(dataio.DataError):
        dataio.load_drifters(tmp_path / "d.csv")


def test_out_of_order_times(tmp_path):
    rows = csv_rows("a", 3).splitlines(keepends=True)
    (tmp_path / "d.csv").write_text(HEADER + rows[0] + rows[2] + rows[1])
    with pytest.raises(dataio.DataError):
        dataio.load_drifters(tmp_path / "d.csv")


def test_write_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [
        dataio.DrifterRecord(f"d{k}", T0 + 900.0 * np.arange(30), -90 + rng.normal(0, 0.3, 30), 25 + rng.normal(0, 0.3, 30),
                             rng.normal(size=30), rng.normal(size=30))
        for k in range(3)
    ]
    back = dataio.load_drifters(dataio.write_drifters(recs, tmp_path / "d.csv", comment="x"))
    for a, b in zip(recs, back):
        assert np.abs(a.lon - b.lon).max() <= 1e-9 and np.abs(a.lat - b.lat).max() <= 1e-9
        np.testing.assert_allclose(a.times, b.times, atol=1e-6)


# ---------------------------------------------------------------- resampling


def test_uniform_record_unchanged():
    rec = dataio.DrifterRecord("a", T0 + 900.0 * np.arange(5), np.arange(5.0), np.arange(5.0) + 20, np.ones(5), np.zeros(5))
    (out,) = dataio.resample_15min(rec)
    np.testing.assert_array_equal(out.lon, rec.lon)
    np.testing.assert_array_equal(out.times, rec.times)


def test_midpoint_inserted():
    rec = dataio.DrifterRecord("a", [T0, T0 + 1800.0], [-90.0, -89.98], [25.0, 25.02], [0.1, 0.3], [0.0, 0.2])
    (out,) = dataio.resample_15min(rec)
    np.testing.assert_allclose(out.times, [T0, T0 + 900.0, T0 + 1800.0])
    assert out.lon[1] == pytest.approx(-89.99) and out.u[1] == pytest.approx(0.2) and out.v[1] == pytest.approx(0.1)


def test_twelve_hour_gap_splits():
    t = np.concatenate([T0 + 900.0 * np.arange(4), T0 + 3 * 900.0 + 12 * 3600.0 + 900.0 * np.arange(4)])
    rec = dataio.DrifterRecord("a", t, np.zeros(8), np.zeros(8) + 25, np.zeros(8), np.zeros(8))
    segs = dataio.resample_15min(rec)
    assert [s.drifter_id for s in segs] == ["a", "a_s1"]
    assert [len(s) for s in segs] == [4, 4]


# ---------------------------------------------------------------- splits


def spread_records(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        dataio.DrifterRecord(f"d{k:04d}", T0 + rng.uniform(0, 30) * 86400.0 + 900.0 * np.arange(3),
                             np.full(3, -95 + rng.uniform(0, 10)), np.full(3, 22 + rng.uniform(0, 8)), np.zeros(3), np.zeros(3))
        for k in range(n)
    ]


def test_random_split_sizes():
    sp = dataio.split(spread_records(835), dataio.SplitSpec("random", 0.2, rng_seed=1))
    assert len(sp.test) == 167 and len(sp.train) == 668
    assert not set(sp.train_ids) & set(sp.test_ids)


def test_split_deterministic():
    recs = spread_records(100)
    spec = dataio.SplitSpec("non_repetitive", 0.2, rng_seed=5)
    assert dataio.split(recs, spec).test_ids == dataio.split(recs[::-1], spec).test_ids


def clustered_records(sizes, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for c, size in enumerate(sizes):
        lon, lat, t = -94 + 0.5 * c, 24 + 0.2 * (c % 7), T0 + 86400.0 * c
        for k in range(size):
            recs.append(dataio.DrifterRecord(f"c{c:02d}_{k}", t + 600.0 * k + 900.0 * np.arange(3),
                                             np.full(3, lon + 0.003 * k), np.full(3, lat), np.zeros(3), np.zeros(3)))
    rng.shuffle(recs)
    return recs


def test_colocated_pair_never_separated():
    recs = clustered_records([2] + [1] * 8)
    for seed in range(20):
        sp = dataio.split(recs, dataio.SplitSpec("non_repetitive", 0.2, rng_seed=seed))
        pair = {"c00_0", "c00_1"}
        assert pair <= set(sp.test_ids) or pair <= set(sp.train_ids)


@settings(max_examples=25, deadline=None)
@given(sizes=st.lists(st.integers(1, 4), min_size=8, max_size=25), seed=st.integers(0, 50))
def test_non_repetitive_keeps_clusters_whole(sizes, seed):
    recs = clustered_records(sizes, seed)
    try:
        sp = dataio.split(recs, dataio.SplitSpec("non_repetitive", 0.2, rng_seed=seed))
    except dataio.DataError:
        return
    test = set(sp.test_ids)
    for c in range(len(sizes)):
        side = {f"c{c:02d}_{k}" in test for k in range(sizes[c])}
        assert len(side) == 1
    assert sp.manifest()["clusters"]


def test_incompatible_cluster_structure():
    recs = clustered_records([10, 10])
    with pytest.raises(dataio.DataError, match="cluster sizes"):
        dataio.split(recs, dataio.SplitSpec("non_repetitive", 0.2))


@pytest.mark.parametrize("kw", [{"mode": "other"}, {"test_fraction": 0.0}, {"test_fraction": 1.0}])
def test_split_spec_validation(kw):
    with pytest.raises(dataio.DataError):
        dataio.SplitSpec(**kw)


# ---------------------------------------------------------------- synthetic truth


def small_cfg(**kw):
    base = dict(seed=2, n_clusters=2, per_cluster=2, duration_days=2.0, min_days=1.0, deploy_window_days=0.5)
    base.update(kw)
    return dataio.SynthConfig(**base)


@pytest.fixture(scope="module")
def small_dataset():
    return dataio.generate_synthetic_truth(small_cfg())


def test_synthetic_fixed_seed_identical(small_dataset):
    again = dataio.generate_synthetic_truth(small_cfg())
    assert [r.drifter_id for r in again.records] == [r.drifter_id for r in small_dataset.records]
    for a, b in zip(again.records, small_dataset.records):
        np.testing.assert_array_equal(a.lon, b.lon)
        np.testing.assert_array_equal(a.u, b.u)
    np.testing.assert_array_equal(again.current.u, small_dataset.current.u)


def test_synthetic_records_on_cadence(small_dataset):
    assert small_dataset.records
    for r in small_dataset.records:
        np.testing.assert_allclose(np.diff(r.times), dataio.CADENCE)
        assert len(r) == int(2.0 * 86400 / dataio.CADENCE) + 1


def test_synthetic_clusters_are_detected(small_dataset):
    groups = dataio.deployment_clusters(small_dataset.records, 2.0, 2.0)
    assert sorted(len(g) for g in groups) == [2, 2]


def _field_gap(ds):
    gaps = []
    for r in ds.records:
        s = ds.truth.sample(r.lon, r.lat, r.times)
        gaps.append(np.abs(np.stack([r.u, r.v], axis=-1) - s.u).max())
    return max(gaps)


def test_synthetic_velocity_approaches_flow_as_response_time_shrinks():
    kw = dict(slip_ue=0.0, slip_u=0.0, duration_days=1.0)
    coarse = _field_gap(dataio.generate_synthetic_truth(small_cfg(drogue_radius=0.05, **kw)))
    fine = _field_gap(dataio.generate_synthetic_truth(small_cfg(drogue_radius=0.025, **kw)))
    # response time scales with the square of the drogue radius
    assert fine < 0.5 * coarse
    assert fine < 1e-3


def test_zero_slip_zero_wind_is_inertial_current_only():
    ds = dataio.generate_synthetic_truth(small_cfg(slip_ue=0.0, slip_u=0.0, wind_amplitude=0.0, wind_base=(0.0, 0.0), duration_days=1.0))
    for r in ds.records:
        s = ds.truth.sample(r.lon, r.lat, r.times)
        assert np.all(s.u_e == 0.0)
        assert np.abs(np.stack([r.u, r.v], -1) - s.u).max() < 2e-3


def _mean_slip(ds):
    d = []
    for r in ds.records:
        s = ds.truth.sample(r.lon, r.lat, r.times)
        g = np.stack([r.u, r.v], -1) - s.u
        d.append(g)
    return np.concatenate(d)


def test_injected_ekman_slip_grows_with_wind_and_follows_ekman_direction():
    kw = dict(slip_u=0.0, duration_days=1.0)
    weak = _mean_slip(dataio.generate_synthetic_truth(small_cfg(wind_amplitude=2.0, **kw)))
    strong = _mean_slip(dataio.generate_synthetic_truth(small_cfg(wind_amplitude=8.0, **kw)))
    assert np.linalg.norm(strong, axis=1).mean() > 1.5 * np.linalg.norm(weak, axis=1).mean()
    ds = dataio.generate_synthetic_truth(small_cfg(wind_amplitude=8.0, **kw))
    r = ds.records[0]
    s = ds.truth.sample(r.lon, r.lat, r.times)
    slip = np.stack([r.u, r.v], -1) - s.u
    expected = 0.05 * ekman_velocity(s.u_wind, r.lat)
    cos = np.sum(slip * expected, axis=1) / (np.linalg.norm(slip, axis=1) * np.linalg.norm(expected, axis=1))
    assert np.median(cos) > 0.95


def test_coarse_export_covers_tracks(small_dataset):
    flow = small_dataset.flow()
    for r in small_dataset.records:
        assert flow.sample(r.lon, r.lat, r.times).valid.all()


def test_ekman_slip_hook():
    ue = np.array([[0.2, -0.1]])
    u = np.array([[0.5, 0.5]])
    np.testing.assert_allclose(dataio.ekman_slip(0.05, 0.02)(ue, u), [[0.01 + 0.01, -0.005 + 0.01]])
