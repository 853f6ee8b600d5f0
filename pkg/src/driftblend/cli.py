"""Command-line front end: ``driftblend {synth,train,predict,evaluate} --config PATH``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, flowfield, integrate, learn, metrics
from .config import ConfigError, ExperimentConfig
from .integrate import EnsembleSpec, Trajectory, iso_time, median_trajectory, seed_ensemble

log = logging.getLogger("driftblend")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class NumericalFailure(RuntimeError):
    pass


DATA_ERRORS = (
    dataio.DataError,
    flowfield.FlowFieldError,
    learn.ModelFormatError,
    metrics.MetricError,
    integrate.IntegrationError,
    FileNotFoundError,
)


# ---------------------------------------------------------------- helpers


def _write_json(path: Path, payload: dict, cfg: ExperimentConfig) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**payload, "provenance": cfg.provenance()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header, rows, cfg: ExperimentConfig) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {cfg.csv_comment()}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _finite_mean(values):
    """Mean over finite entries, or None when there are none (JSON has no NaN)."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else None


def _fmt(x) -> str:
    return repr(float(x))


def load_dataset(cfg: ExperimentConfig):
    d = cfg.path("dataset")
    if not (d / "drifters.csv").exists():
        raise FileNotFoundError(f"no dataset at {d}; run `driftblend synth` first")
    records = dataio.load_drifters(d / "drifters.csv")
    current = flowfield.load_field(d / "current.json")
    wind = flowfield.load_field(d / "wind10.json")
    return records, flowfield.GriddedFlow(current, wind)


def load_split(cfg: ExperimentConfig, records):
    path = cfg.path("run") / "split.json"
    by_id = {r.drifter_id: r for r in records}
    if path.exists():
        m = json.loads(path.read_text())
        spec = dataio.SplitSpec(**m["spec"])
        if spec != cfg.split_spec():
            log.info("split spec changed; recomputing split")
        else:
            try:
                return dataio.Split([by_id[i] for i in m["train"]], [by_id[i] for i in m["test"]], spec, m.get("clusters", []))
            except KeyError as exc:
                raise dataio.DataError(f"split manifest refers to unknown drifter {exc}") from exc
    sp = dataio.split(records, cfg.split_spec())
    _write_json(path, sp.manifest(), cfg)
    return sp


def _workers(cfg: ExperimentConfig, serial: bool) -> int:
    if serial:
        return 1
    w = int(cfg.raw["predict"].get("workers", 0))
    return w if w > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------- synth


def cmd_synth(cfg: ExperimentConfig) -> Path:
    scfg = cfg.synth_config()
    d = cfg.raw["drifter"]
    explicit = cfg.raw["synth"]
    overrides = {
        "rho_p": d["rho_p"], "rho_f": d["rho_f"], "drogue_radius": d["a"],
        "length_scale": d["length_scale"], "velocity_scale": d["velocity_scale"],
    }
    for k, v in overrides.items():
        if k not in explicit:
            setattr(scfg, k, float(v))
    ds = dataio.generate_synthetic_truth(scfg)
    out = cfg.path("dataset")
    out.mkdir(parents=True, exist_ok=True)
    flowfield.save_field(ds.current, out / "current.json")
    flowfield.save_field(ds.wind, out / "wind10.json")
    dataio.write_drifters(ds.records, out / "drifters.csv", comment=cfg.csv_comment())
    _write_json(
        out / "manifest.json",
        {
            "kind": "synthetic",
            "n_drifters": len(ds.records),
            "drifters": [r.drifter_id for r in ds.records],
            "fields": {"current": "current.json", "wind10": "wind10.json"},
            "drifter_file": "drifters.csv",
            "synth": scfg.to_dict(),
            "drifter_params": ds.params.to_dict(),
            "injected_slip": {"ue_coeff": scfg.slip_ue, "u_coeff": scfg.slip_u},
        },
        cfg,
    )
    log.info("wrote %d synthetic drifters to %s", len(ds.records), out)
    return out


# ---------------------------------------------------------------- train


def cmd_train(cfg: ExperimentConfig) -> Path:
    records, flow = load_dataset(cfg)
    sp = load_split(cfg, records)
    if not sp.train:
        raise dataio.DataError("training side of the split is empty")
    params = cfg.drifter_params()
    samples = [learn.TrainingSample.from_sequence(learn.build_features(r, flow, params)) for r in sp.train]
    tcfg = cfg.train_config()
    model, history = learn.train(samples, tcfg)
    if not np.all(np.isfinite(history)) or not all(np.isfinite(p).all() for p in model.params().values()):
        raise NumericalFailure("training diverged (non-finite loss or weights)")
    run = cfg.path("run")
    _write_csv(run / "loss_log.csv", ("epoch", "loss"), [(i + 1, _fmt(l)) for i, l in enumerate(history)], cfg)
    path = learn.save_model(model, cfg.path("model"), extra=cfg.provenance())
    log.info("trained on %d drifters; final loss %.4g", len(samples), history[-1])
    return path


# ---------------------------------------------------------------- predict

SINGLE_STEP_COLUMNS = ("drifter_id", "iso_time", "lon", "lat", "u_real", "v_real", "u_det", "v_det", "u_blend", "v_blend")


def _load_model_optional(cfg: ExperimentConfig, baseline_only: bool):
    if baseline_only:
        return None
    path = cfg.path("model")
    if not path.exists():
        log.info("no model at %s; predicting with the deterministic baseline only", path)
        return None
    return learn.load_model(path)


def predict_single_step(test, flow, params, model):
    out = []
    for r in test:
        seq, vd, vb = learn.single_step_velocities(r, flow, params, model)
        if not seq.valid.all():
            raise dataio.DataError(f"test drifter {r.drifter_id} leaves field coverage")
        out.append((r, vd, vb))
    return out


def _forecast_chunk(flow, params, model, tracks, ens_cfg, seed, n_steps):
    starts, t0, ids = [], [], []
    count, radius = int(ens_cfg["count"]), float(ens_cfg["radius_m"])
    for r in tracks:
        spec = EnsembleSpec((float(r.lon[0]), float(r.lat[0])), radius, count, seed + _stable_index(r.drifter_id))
        starts.append(seed_ensemble(spec))
        t0 += [r.times[0]] * count
        ids += [f"{r.drifter_id}/m{k:03d}" for k in range(count)]
    horizon = max(len(r) - 1 for r in tracks) if n_steps <= 0 else n_steps
    ens = learn.forecast_ensemble(flow, params, model, np.concatenate(starts), np.array(t0), horizon, ids=ids)
    result = {}
    for j, r in enumerate(tracks):
        members = ens[j * count : (j + 1) * count]
        n = min(len(r), horizon + 1)
        members = [_cut(m, n) for m in members]
        result[r.drifter_id] = members
    return result


def _stable_index(drifter_id: str) -> int:
    return int.from_bytes(drifter_id.encode()[-4:].rjust(4, b"\0"), "big") % 100_003


def _cut(tr: Trajectory, n: int) -> Trajectory:
    return Trajectory(tr.drifter_id, tr.times[:n], tr.lon[:n], tr.lat[:n], tr.u[:n], tr.v[:n], tr.status[:n])


def predict_forecast(test, flow, params, model, ens_cfg, seed, n_steps=0, workers=1):
    """Ensemble forecasts per test drifter for one model; merged by drifter order."""
    if workers <= 1 or len(test) < 2:
        return _forecast_chunk(flow, params, model, test, ens_cfg, seed, n_steps)
    chunks = [c for c in np.array_split(np.arange(len(test)), workers) if c.size]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        futs = [pool.submit(_forecast_chunk, flow, params, model, [test[i] for i in c], ens_cfg, seed, n_steps) for c in chunks]
        parts = [f.result() for f in futs]
    merged = {}
    for p in parts:
        merged.update(p)
    return {r.drifter_id: merged[r.drifter_id] for r in test}


def cmd_predict(cfg: ExperimentConfig, mode: str | None = None, baseline_only=False, serial=False) -> Path:
    records, flow = load_dataset(cfg)
    sp = load_split(cfg, records)
    if not sp.test:
        raise dataio.DataError("test side of the split is empty")
    params = cfg.drifter_params()
    model = _load_model_optional(cfg, baseline_only)
    out = cfg.path("run") / "predictions"
    modes = ("single_step", "forecast") if mode is None else (mode,)

    if "single_step" in modes:
        rows = []
        for r, vd, vb in predict_single_step(sp.test, flow, params, model):
            for i in range(len(r)):
                rows.append(
                    [r.drifter_id, iso_time(r.times[i]), _fmt(r.lon[i]), _fmt(r.lat[i]), _fmt(r.u[i]), _fmt(r.v[i]),
                     _fmt(vd[i, 0]), _fmt(vd[i, 1]), _fmt(vb[i, 0]), _fmt(vb[i, 1])]
                )
        _write_csv(out / "single_step.csv", SINGLE_STEP_COLUMNS, rows, cfg)

    if "forecast" in modes:
        ens_cfg = cfg.raw["ensemble"]
        n_steps = int(cfg.raw["predict"].get("forecast_steps", 0))
        workers = _workers(cfg, serial)
        for name, m in (("deterministic", None), ("blended", model)):
            fc = predict_forecast(sp.test, flow, params, m, ens_cfg, cfg.seed, n_steps, workers)
            trajs = []
            for did, members in fc.items():
                trajs.extend(members)
                trajs.append(median_trajectory(members, drifter_id=f"{did}/median"))
            integrate.write_trajectories_csv(trajs, out / f"forecast_{name}.csv", comment=cfg.csv_comment())
            integrate.write_geojson(trajs, out / f"forecast_{name}.geojson", properties={"model": name, "config_sha256": cfg.sha256})
    _write_json(
        out / "predict_manifest.json",
        {"modes": list(modes), "model": None if model is None else os.path.relpath(cfg.path("model"), cfg.base_dir), "baseline_only": model is None},
        cfg,
    )
    return out


# ---------------------------------------------------------------- evaluate


def single_step_metrics(rows_by_id: dict, u_bar: float) -> list[dict]:
    out = []
    for did in sorted(rows_by_id):
        a = rows_by_id[did]
        out.append(
            {
                "drifter_id": did,
                "rmse_det": metrics.rmse_zonal(a["u_det"], a["u_real"], u_bar),
                "rmse_blend": metrics.rmse_zonal(a["u_blend"], a["u_real"], u_bar),
                "n": int(len(a["u_real"])),
            }
        )
    return out


def forecast_skills(real_by_id: dict, ensembles: dict) -> dict:
    """Per drifter: mean skill over members and skill of the median trajectory."""
    out = {}
    for did, members in ensembles.items():
        real = real_by_id[did]
        n = len(members[0])
        real_cut = _cut(real, n) if len(real) != n else real
        s = [metrics.skill_score(m, real_cut).s for m in members]
        med = median_trajectory(members, drifter_id=f"{did}/median")
        out[did] = {"mean_skill": float(np.mean(s)), "median_skill": metrics.skill_score(med, real_cut).s, "n": n - 1}
    return out


def _group_single_step(rows):
    by = {}
    for r in rows:
        by.setdefault(r["drifter_id"], []).append(r)
    return {
        did: {k: np.array([float(x[k]) for x in rs]) for k in ("u_real", "v_real", "u_det", "v_det", "u_blend", "v_blend")}
        for did, rs in by.items()
    }


def _group_forecast(trajs):
    ens = {}
    for t in trajs:
        did, member = t.drifter_id.rsplit("/", 1)
        if member != "median":
            ens.setdefault(did, []).append(t)
    return ens


def cmd_evaluate(cfg: ExperimentConfig) -> dict:
    records, _ = load_dataset(cfg)
    sp = load_split(cfg, records)
    run = cfg.path("run")
    pred = run / "predictions"
    reports = run / "reports"
    pm = json.loads((pred / "predict_manifest.json").read_text())
    if pm["provenance"]["config_sha256"] != cfg.sha256:
        raise dataio.DataError("predictions were produced by a different config (run id mismatch)")

    u_bar = metrics.mean_speed([np.stack([r.u, r.v], axis=-1) for r in records])
    real_by_id = {r.drifter_id: r for r in sp.test}
    summary = {"n_test": len(sp.test), "n_train": len(sp.train), "u_bar": u_bar, "split_mode": sp.spec.mode}

    if (pred / "single_step.csv").exists():
        ss = single_step_metrics(_group_single_step(_read_csv(pred / "single_step.csv")), u_bar)
        _write_csv(reports / "rmse.csv", ("drifter_id", "rmse_det", "rmse_blend", "n"),
                   [(d["drifter_id"], _fmt(d["rmse_det"]), _fmt(d["rmse_blend"]), d["n"]) for d in ss], cfg)
        edges = np.asarray(cfg.raw["evaluate"]["rmse_bins"], dtype=np.float64)
        cd, _ = metrics.histogram([d["rmse_det"] for d in ss], edges)
        cb, _ = metrics.histogram([d["rmse_blend"] for d in ss], edges)
        _write_csv(reports / "rmse_histogram.csv", ("bin_lo", "bin_hi", "count_det", "count_blend"),
                   [(_fmt(edges[i]), _fmt(edges[i + 1]), int(cd[i]), int(cb[i])) for i in range(len(cd))], cfg)
        med_d = float(np.median([d["rmse_det"] for d in ss]))
        med_b = float(np.median([d["rmse_blend"] for d in ss]))
        summary["single_step"] = {
            "median_rmse_det": med_d,
            "median_rmse_blend": med_b,
            "median_rmse_reduction": (1.0 - med_b / med_d) if med_d > 0 else 0.0,
            "fraction_blend_better": float(np.mean([d["rmse_blend"] < d["rmse_det"] for d in ss])),
        }

    fc_paths = {k: pred / f"forecast_{k}.csv" for k in ("deterministic", "blended")}
    if all(p.exists() for p in fc_paths.values()):
        skills = {k: forecast_skills(real_by_id, _group_forecast(integrate.read_trajectories_csv(p))) for k, p in fc_paths.items()}
        rows = []
        for k, sk in skills.items():
            for did in sorted(sk):
                rows.append((did, k, _fmt(sk[did]["mean_skill"]), _fmt(sk[did]["median_skill"]), sk[did]["n"]))
        _write_csv(reports / "skill.csv", ("drifter_id", "model", "mean_skill", "median_skill", "n"), rows, cfg)
        ids = sorted(skills["deterministic"])
        summary["forecast"] = {
            "fraction_mean_skill_blend_better": float(np.mean([skills["blended"][i]["mean_skill"] > skills["deterministic"][i]["mean_skill"] for i in ids])),
            "fraction_median_skill_blend_better": float(np.mean([skills["blended"][i]["median_skill"] > skills["deterministic"][i]["median_skill"] for i in ids])),
            "mean_skill_det": float(np.mean([skills["deterministic"][i]["mean_skill"] for i in ids])),
            "mean_skill_blend": float(np.mean([skills["blended"][i]["mean_skill"] for i in ids])),
        }

    sims = [metrics.similarity_report(r, sp.train) for r in sp.test]
    _write_csv(reports / "similarity.csv", ("drifter_id", "max_correlation", "max_mean_ms_coherence", "dist_to_trained_km", "time_to_trained_h"),
               [(s.drifter_id, _fmt(s.max_correlation), _fmt(s.max_mean_ms_coherence), _fmt(s.dist_to_trained), _fmt(s.time_to_trained)) for s in sims], cfg)
    summary["similarity"] = {
        "mean_dist_to_trained_km": float(np.mean([s.dist_to_trained for s in sims])),
        "mean_time_to_trained_h": float(np.mean([s.time_to_trained for s in sims])),
        "mean_max_correlation": float(np.mean([s.max_correlation for s in sims])),
        "mean_max_mean_ms_coherence": _finite_mean([s.max_mean_ms_coherence for s in sims]),
    }
    _write_json(reports / "summary.json", summary, cfg)
    return summary


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftblend", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "predict", "evaluate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--serial", action="store_true", help="force deterministic single-worker ordering")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "predict":
            sp.add_argument("--mode", choices=("single_step", "forecast"), default=None)
            sp.add_argument("--baseline-only", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        with np.errstate(over="raise", invalid="ignore", divide="ignore"):
            if args.command == "synth":
                cmd_synth(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "predict":
                cmd_predict(cfg, args.mode, args.baseline_only, args.serial)
            else:
                summary = cmd_evaluate(cfg)
                print(json.dumps(summary, indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
