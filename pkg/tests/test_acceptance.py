"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (also repeated in the pytest
terminal summary) and then asserts, so a failing criterion stays red.
"""

import json
import math
import shutil
import time

import numpy as np
import pytest

from driftblend import cli, learn, metrics
from driftblend import flowfield as ff
from driftblend.integrate import Trajectory

from .conftest import ACCEPTANCE_LINES
from .test_dynamics import FLOWS, manifold_gaps
from .test_integrate import rotation_closure_error
from .test_learn import tiny_model

EXPERIMENT = """
seed = 11
[split]
mode = "{mode}"
test_fraction = 0.2
[train]
hidden = 32
epochs = 30
batch_size = 8
learning_rate = 0.005
[ensemble]
count = 8
radius_m = 2000.0
"""


def verdict(number, ok, detail, started):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} ({time.perf_counter() - started:.1f} s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def run_pipeline(directory, mode="random", dataset_from=None):
    directory.mkdir(parents=True, exist_ok=True)
    cfg = directory / "cfg.toml"
    cfg.write_text(EXPERIMENT.format(mode=mode))
    steps = ["train", "predict", "evaluate"]
    if dataset_from is None:
        steps.insert(0, "synth")
    else:
        shutil.copytree(dataset_from, directory / "dataset")
    for cmd in steps:
        code = cli.main([cmd, "--config", str(cfg), "--serial"])
        assert code == cli.EXIT_OK, f"{cmd} exited with {code}"
    return json.loads((directory / "run" / "reports" / "summary.json").read_text())


@pytest.fixture(scope="session")
def random_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance_random")
    t0 = time.perf_counter()
    summary = run_pipeline(d)
    return d, summary, time.perf_counter() - t0


@pytest.fixture(scope="session")
def clustered_run(tmp_path_factory, random_run):
    d = tmp_path_factory.mktemp("acceptance_clustered")
    t0 = time.perf_counter()
    summary = run_pipeline(d, "non_repetitive", dataset_from=random_run[0] / "dataset")
    return d, summary, time.perf_counter() - t0


def test_criterion_1_ekman_formula():
    t0 = time.perf_counter()
    ue = ff.ekman_velocity([10.0, 0.0], 30.0)
    exact = bool(np.all(np.abs(ue - [0.127, -0.127]) <= 1e-12))
    rng = np.random.default_rng(0)
    lat = np.concatenate([np.linspace(2.5, 85, 50), -np.linspace(2.5, 85, 50)])
    wind = rng.normal(scale=8.0, size=(100, 2))
    mag = np.hypot(*ff.ekman_velocity(wind, lat).T)
    law = 0.0127 * np.hypot(*wind.T) / np.sqrt(np.sin(np.radians(np.abs(lat))))
    worst = float(np.max(np.abs(mag - law) / law))
    elapsed = time.perf_counter() - t0
    verdict(1, exact and worst <= 1e-12 and elapsed < 1.0,
            f"u_e={ue.tolist()}, sweep max rel err {worst:.1e}", t0)


def test_criterion_2_slow_manifold_order():
    t0 = time.perf_counter()
    orders = {}
    for name, (field, f) in FLOWS.items():
        gaps = [manifold_gaps(field, f, e)[0] for e in (0.04, 0.02, 0.01)]
        orders[name] = [math.log2(gaps[i] / gaps[i + 1]) for i in range(2)]
    ok = all(1.7 <= o <= 2.3 for v in orders.values() for o in v) and time.perf_counter() - t0 < 60
    detail = ", ".join(f"{k} orders {[round(o, 3) for o in v]}" for k, v in orders.items())
    verdict(2, ok, detail, t0)


def test_criterion_3_rk4_order():
    t0 = time.perf_counter()
    errs = [rotation_closure_error(n) for n in (16, 32, 64, 128)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(3)]
    ok = all(3.7 <= o <= 4.3 for o in orders) and time.perf_counter() - t0 < 10
    verdict(3, ok, f"orders {[round(o, 3) for o in orders]}", t0)


def _meridian(sign, n=40, step=0.01):
    lat = 25.0 + sign * step * np.arange(n)
    z = np.zeros(n)
    return Trajectory("t", 900.0 * np.arange(n), z - 90.0, lat, z, z, z)


def test_criterion_4_skill_closed_forms():
    t0 = time.perf_counter()
    real = _meridian(1.0)
    scores = {
        "identical": (metrics.skill_score(real, real).s, 1.0),
        "stationary": (metrics.skill_score(_meridian(0.0), real).s, 0.0),
        "antipodal": (metrics.skill_score(_meridian(-1.0), real).s, -1.0),
    }
    ok = all(abs(s - e) <= 1e-12 for s, e in scores.values()) and time.perf_counter() - t0 < 1.0
    verdict(4, ok, ", ".join(f"{k} {s!r}" for k, (s, _) in scores.items()), t0)


def test_criterion_5_lstm_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(42)
    m = tiny_model(hidden=2, seed=3, scale=0.6)
    x, y = rng.normal(size=(3, 2, learn.N_INPUTS)), rng.normal(size=(3, 2, 2))
    grads = learn.lstm_gradients(m, x, y)[0]
    # fourth-order central stencil: the two-point rule's round-off alone is
    # about 1e-11, which is a 1e-6 relative error on the smallest entries
    h, worst, count = 1e-3, 0.0, 0
    for name, p in m.params().items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            values = []
            for k in (2, 1, -1, -2):
                p[idx] = old + k * h
                values.append(learn.lstm_gradients(m, x, y)[1])
            p[idx] = old
            num = (-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * h)
            ana = grads[name][idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
            count += 1
    ok = worst < 1e-6 and time.perf_counter() - t0 < 10
    verdict(5, ok, f"{count} parameters, worst relative error {worst:.2e}", t0)


def test_criterion_6_blended_beats_deterministic(random_run):
    t0 = time.perf_counter()
    d, s, elapsed = random_run
    n_drifters = json.loads((d / "dataset" / "manifest.json").read_text())["n_drifters"]
    reduction = s["single_step"]["median_rmse_reduction"]
    frac = s["forecast"]["fraction_mean_skill_blend_better"]
    ok = n_drifters >= 60 and reduction >= 0.30 and frac >= 0.60 and elapsed < 600
    verdict(6, ok, f"{n_drifters} drifters, median RMSE reduction {reduction:.3f}, "
                   f"mean-skill win fraction {frac:.3f}, pipeline {elapsed:.0f} s", t0)


def test_criterion_7_non_repetitive_direction(random_run, clustered_run):
    t0 = time.perf_counter()
    _, rnd, _ = random_run
    _, clu, elapsed = clustered_run
    det, blend = clu["single_step"]["median_rmse_det"], clu["single_step"]["median_rmse_blend"]
    d_rnd = rnd["similarity"]["mean_dist_to_trained_km"]
    d_clu = clu["similarity"]["mean_dist_to_trained_km"]
    ok = blend < det and d_clu > d_rnd and elapsed < 600
    verdict(7, ok, f"blended {blend:.4f} vs baseline {det:.4f}, distance to trained "
                   f"{d_clu:.2f} km vs {d_rnd:.2f} km, pipeline {elapsed:.0f} s", t0)


def test_criterion_8_serial_rerun_bit_identical(random_run, tmp_path):
    t0 = time.perf_counter()
    first = random_run[0]
    run_pipeline(tmp_path)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (first / f).read_bytes() != (tmp_path / f).read_bytes()]
    verdict(8, not differing, f"{len(files)} output files compared, {len(differing)} differ {differing}", t0)
