"""Run configuration: schema validation, defaults and fingerprinting."""

from __future__ import annotations

import copy
import datetime as dt
import glob
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .econometrics import SPEC_TERMS
from .panel import PRESETS
from .spatial import PRECISIONS


ROBUSTNESS_LAGS = (15, 30, 45)


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


INPUT_KEYS = {
    "events": True, "towers": True, "districts": True, "ndvi": True, "cultivation": True, "violence": True,
    "control": True, "covariates": False, "population": False, "roads": False,
}

DEFAULTS: dict = {
    "inputs": {},
    "output": "out",
    "study": {"start": None, "end": None},
    "seed": 0,
    "shards": 64,
    "params": {
        "min_days": 7,
        "max_gap": 3,
        "snap_km": 1.0,
        "high_threshold": 1000.0,
        "min_present": 20,
        "placebo_R": 250,
        "placebo_seed": 0,
        "placebo_workers": 1,
        "perturb_days": 14,
        "precision_threshold": 0.5,
        "entry_buffer_km": 10.0,
        "road_km": 5.0,
        "road_precisions": ["exact", "radius25km"],
        "ci": "normal",
        "write_daily": False,
    },
    "specs": ["eq2", "eq4"],
    "presets": ["main"],
    "outcomes": ["in_rate"],
    "synth": {},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and base[k] and k not in ("synth",):
            if not isinstance(v, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(raw or {}, p.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | os.PathLike = ".") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        inputs = raw.get("inputs", {}) or {}
        if not isinstance(inputs, dict):
            raise ConfigError("inputs must be a mapping")
        unknown = set(inputs) - set(INPUT_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s) in inputs: {sorted(unknown)}")
        data = _merge({k: v for k, v in DEFAULTS.items() if k != "inputs"}, {k: v for k, v in raw.items()
                                                                             if k != "inputs"})
        data["inputs"] = dict(inputs)
        cfg = cls(data, Path(base_dir))
        cfg._validate()
        return cfg

    def _validate(self):
        d = self.data
        for s in d["specs"]:
            if s not in SPEC_TERMS:
                raise ConfigError(f"unknown spec {s!r}")
        for p in d["presets"]:
            if p not in PRESETS:
                raise ConfigError(f"unknown preset {p!r}")
        if not isinstance(d["outcomes"], list) or not d["outcomes"]:
            raise ConfigError("outcomes must be a non-empty list")
        if not isinstance(d["shards"], int) or d["shards"] < 1:
            raise ConfigError("shards must be a positive integer")
        prm = d["params"]
        if prm["ci"] not in ("normal", "t"):
            raise ConfigError("params.ci must be 'normal' or 't'")
        for k in ("min_days", "placebo_R", "placebo_workers"):
            if int(prm[k]) < 1:
                raise ConfigError(f"params.{k} must be >= 1")
        if not prm["road_precisions"] or not set(prm["road_precisions"]) <= set(PRECISIONS):
            raise ConfigError(f"params.road_precisions must be a non-empty subset of {list(PRECISIONS)}")
        if int(prm["max_gap"]) < 0:
            raise ConfigError("params.max_gap must be >= 0")
        for k in ("start", "end"):
            v = d["study"][k]
            if v is not None:
                try:
                    d["study"][k] = dt.date.fromisoformat(str(v)).isoformat()
                except ValueError as exc:
                    raise ConfigError(f"study.{k}: {exc}") from exc

    # -- accessors -------------------------------------------------------------
    def __getitem__(self, key):
        return self.data[key]

    @property
    def params(self) -> dict:
        return self.data["params"]

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    @property
    def out_dir(self) -> Path:
        return self.path(self.data["output"])

    def input(self, key: str) -> Path | None:
        v = self.data["inputs"].get(key)
        return None if v is None else self.path(v)

    def event_files(self) -> list[str]:
        v = self.data["inputs"].get("events")
        items = v if isinstance(v, list) else [v]
        files: list[str] = []
        for item in items:
            p = self.path(str(item))
            if p.is_dir():
                files.extend(sorted(str(f) for f in p.glob("*.csv")))
            elif any(ch in str(item) for ch in "*?["):
                files.extend(sorted(glob.glob(str(p))))
            else:
                files.append(str(p))
        return files

    def check_inputs(self):
        """Every required input must exist before any work starts."""
        missing = []
        for key, required in INPUT_KEYS.items():
            v = self.data["inputs"].get(key)
            if v is None:
                if required:
                    missing.append(f"{key} (not configured)")
                continue
            if key == "events":
                files = self.event_files()
                if not files:
                    missing.append(f"events ({v}: no files)")
                missing.extend(f"events ({f})" for f in files if not os.path.exists(f))
            elif not self.path(v).exists():
                missing.append(f"{key} ({self.path(v)})")
        if self.data["study"]["start"] is None or self.data["study"]["end"] is None:
            missing.append("study.start/study.end")
        if missing:
            raise ConfigError("missing inputs: " + ", ".join(missing))

    def input_digests(self) -> dict[str, str]:
        out = {}
        for key in INPUT_KEYS:
            if self.data["inputs"].get(key) is None:
                continue
            files = self.event_files() if key == "events" else [str(self.input(key))]
            h = hashlib.sha256()
            for f in files:
                h.update(os.path.basename(f).encode())
                with open(f, "rb") as fh:
                    for chunk in iter(lambda: fh.read(1 << 22), b""):
                        h.update(chunk)
            out[key] = h.hexdigest()
        return out

    def fingerprint(self) -> str:
        """sha256 over the resolved config and the content of every input."""
        doc = {"version": __version__, "config": self.data, "inputs": self.input_digests()}
        blob = json.dumps(doc, sort_keys=True, default=str, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def lags(self) -> list[int]:
        """Lags needed by the configured presets and the lag sensitivity checks."""
        from .panel import preset
        return sorted({preset(p).lag for p in self.data["presets"]} | set(ROBUSTNESS_LAGS))
