"""Experiment configuration: a TOML file with one table per stage."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .dataio import SplitSpec, SynthConfig
from .dynamics import DrifterParams, PhysicalDrifterParams, nondimensionalize
from .learn import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "paths": {"dataset": "dataset", "run": "run", "model": ""},
    "synth": {},
    "drifter": {"rho_p": 1030.0, "rho_f": 1025.0, "a": 0.05, "nu_f": 1.0e-6, "length_scale": 1.0e4, "velocity_scale": 0.5},
    "split": {"mode": "random", "test_fraction": 0.2, "cluster_radius_km": 2.0, "cluster_window_hours": 2.0},
    "train": {"hidden": 200, "epochs": 100, "truncation": 192, "learning_rate": 1e-3, "batch_size": 32, "clip_norm": 5.0},
    "ensemble": {"count": 8, "radius_m": 2000.0},
    "predict": {"forecast_steps": 0, "workers": 0},
    "evaluate": {"rmse_bins": [0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0]},
}


def _merge(base: dict, over: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _only(section: dict, cls, name: str, skip=()):
    names = {f.name for f in fields(cls)} - set(skip)
    extra = set(section) - names
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    return {k: v for k, v in section.items() if k in names}


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "ExperimentConfig":
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, data), Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        cfg = ExperimentConfig(raw, self.base_dir)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.synth_config()
            self.drifter_params()
            self.split_spec()
            self.train_config()
            e = self.raw["ensemble"]
            if not (int(e["count"]) >= 1 and 0.0 <= float(e["radius_m"]) < 10_000.0):
                raise ConfigError("[ensemble] needs count >= 1 and 0 <= radius_m < 10000")
            bins = self.raw["evaluate"]["rmse_bins"]
            if len(bins) < 2 or any(b1 <= b0 for b0, b1 in zip(bins, bins[1:])):
                raise ConfigError("[evaluate] rmse_bins must be increasing")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    # -- sections

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def path(self, key: str) -> Path:
        p = self.raw["paths"].get(key) or ""
        if key == "model" and not p:
            return self.path("run") / "model.json"
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def synth_config(self) -> SynthConfig:
        s = _only(self.raw["synth"], SynthConfig, "synth", skip=("seed",))
        if "wind_base" in s:
            s["wind_base"] = tuple(s["wind_base"])
        return SynthConfig(seed=self.seed, **s)

    def physical_params(self) -> PhysicalDrifterParams:
        d = dict(self.raw["drifter"])
        d.pop("length_scale", None)
        d.pop("velocity_scale", None)
        return PhysicalDrifterParams(**_only(d, PhysicalDrifterParams, "drifter"))

    def drifter_params(self) -> DrifterParams:
        d = self.raw["drifter"]
        return nondimensionalize(self.physical_params(), float(d["length_scale"]), float(d["velocity_scale"]))

    def split_spec(self) -> SplitSpec:
        return SplitSpec(rng_seed=self.seed, **_only(self.raw["split"], SplitSpec, "split", skip=("rng_seed",)))

    def train_config(self) -> TrainConfig:
        return TrainConfig(rng_seed=self.seed, **_only(self.raw["train"], TrainConfig, "train", skip=("rng_seed",)))

    # -- provenance

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def provenance(self) -> dict:
        return {"config_sha256": self.sha256, "seed": self.seed, "config": self.raw}

    def csv_comment(self) -> str:
        return f"config_sha256={self.sha256} seed={self.seed}"
