"""District-year analysis panel.

For every district-year with a peak date t0 the daily migration series M
is reduced to a baseline level (mean over days t0-120..t0-31) and a
harvest excess (the largest 7-day mean of M - baseline among windows
starting 15..29 days after t0). Days flagged invalid upstream are missing.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .calendar import StudyCalendar
from .metrics import MetricsTable

HIGH_THRESHOLD_HA = 1000.0
COVARIATES = (
    "log_land_area", "log_other_cultivation", "population", "provincial_capital", "frac_cultivated",
    "road_density", "frac_built_up", "frac_tracks", "health_per_100k", "ethnic_diversity", "frac_barren",
)


class PanelError(ValueError):
    """Inconsistent keys across panel inputs."""


@dataclass(frozen=True)
class PanelConfig:
    outcome: str = "in_rate"
    lag: int = 30
    baseline_start: int = 120   # days before t0 (inclusive)
    baseline_end: int = 31
    min_baseline_obs: int = 90
    search_start: int = 15      # harvest window search, days after t0
    search_end: int = 35
    window: int = 7
    high_threshold: float = HIGH_THRESHOLD_HA

    @property
    def starts(self) -> range:
        return range(self.search_start, self.search_end - self.window + 2)


PRESETS: dict[str, dict] = {
    "main": {},
    "tabS1_c2": {"lag": 15},
    "tabS1_c3": {"lag": 45},
    "tabS1_c4": {"search_start": 1, "search_end": 45},
    "tabS1_c5": {"search_start": 1, "search_end": 45, "window": 14},
}


def preset(name: str, **overrides) -> PanelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown panel preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PanelConfig(), **{**PRESETS[name], **overrides})


@dataclass
class OutcomeSeries:
    district_id: str
    year: int
    t0: dt.date
    m_base: float
    offsets: np.ndarray   # days relative to t0
    excess: np.ndarray    # E_dt, NaN where undefined


@dataclass
class PanelRow:
    district_id: str
    province_id: str
    year: int
    outcome: float
    poppy_ha: float
    cultivation_class: str
    violence: bool
    road_violence: bool | None
    taliban: bool
    eradication_pct: float | None
    covariates: dict[str, float]


# ---------------------------------------------------------------------------
# window arithmetic

def baseline_mean(series: np.ndarray, valid: np.ndarray, t0: int, cfg: PanelConfig = PanelConfig()) -> float | None:
    """Mean of valid M over [t0-120, t0-31]; None with fewer than 90 valid days."""
    a, b = t0 - cfg.baseline_start, t0 - cfg.baseline_end
    lo, hi = max(a, 0), min(b, len(series) - 1)
    if hi < lo:
        return None
    ok = np.asarray(valid[lo:hi + 1], dtype=bool)
    if ok.sum() < cfg.min_baseline_obs:
        return None
    return float(np.asarray(series[lo:hi + 1], dtype=float)[ok].mean())


def harvest_excess(excess: np.ndarray, valid: np.ndarray, t0: int, cfg: PanelConfig = PanelConfig()) -> float | None:
    """Largest mean of ``cfg.window`` consecutive E_dt over the search window.

    Windows touching an undefined day are skipped; None if all are.
    """
    n = len(excess)
    L = cfg.window
    best = None
    for i in cfg.starts:
        a = t0 + i
        if a < 0 or a + L > n:
            continue
        if not np.all(valid[a:a + L]):
            continue
        m = float(np.sum(excess[a:a + L])) / L
        if best is None or m > best:
            best = m
    return best


def outcome_for(series: np.ndarray, valid: np.ndarray, t0: int, cfg: PanelConfig = PanelConfig()):
    """(E_dy, M_base, reason) for one district-year; reason names a drop."""
    base = baseline_mean(series, valid, t0, cfg)
    if base is None:
        return None, None, "baseline_insufficient"
    e = harvest_excess(series - base, valid, t0, cfg)
    if e is None:
        return None, base, "harvest_window_undefined"
    return e, base, None


def classify_cultivation(poppy_ha: float, high_threshold: float = HIGH_THRESHOLD_HA) -> str:
    if poppy_ha < 0 or math.isnan(poppy_ha):
        raise ValueError(f"poppy hectares must be >= 0, got {poppy_ha}")
    if poppy_ha >= high_threshold:
        return "high"
    if poppy_ha > 0:
        return "low"
    return "none"


def eradication_pct(cultivated_ha: float, eradicated_ha: float) -> float | None:
    if cultivated_ha < 0 or eradicated_ha < 0:
        raise ValueError("hectares must be non-negative")
    total = cultivated_ha + eradicated_ha
    if total == 0:
        return None
    return eradicated_ha / total


# ---------------------------------------------------------------------------
# builder

@dataclass
class Panel:
    frame: pd.DataFrame
    report: pd.DataFrame                 # district_id, year, reason
    config: PanelConfig
    covariates: tuple[str, ...] = ()
    series: list[OutcomeSeries] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.frame)

    def rows(self) -> list[PanelRow]:
        out = []
        for r in self.frame.to_dict("records"):
            out.append(PanelRow(
                r["district_id"], r["province_id"], int(r["year"]), float(r["outcome"]), float(r["poppy_ha"]),
                r["cultivation_class"], bool(r["violence"]),
                None if pd.isna(r.get("road_violence")) else bool(r["road_violence"]),
                bool(r["taliban"]), None if pd.isna(r["eradication_pct"]) else float(r["eradication_pct"]),
                {c: float(r[c]) for c in self.covariates},
            ))
        return out


class PanelBuilder:
    """Joins static district-year inputs once; outcomes are rebuilt per peak set."""

    def __init__(self, metrics: MetricsTable | Mapping[int, MetricsTable], provinces: Mapping[str, str],
                 cultivation: pd.DataFrame, taliban: Mapping[str, bool],
                 events: pd.DataFrame | None = None, covariates: pd.DataFrame | None = None,
                 road_index=None, high_threshold: float = HIGH_THRESHOLD_HA):
        self.metrics = dict(metrics) if isinstance(metrics, Mapping) else {metrics.lag: metrics}
        any_m = next(iter(self.metrics.values()))
        self.district_ids: list[str] = list(any_m.district_ids)
        self.calendar: StudyCalendar = any_m.calendar
        self.provinces = {str(k): str(v) for k, v in provinces.items()}
        self.taliban = {str(k): bool(v) for k, v in taliban.items()}
        self.road_index = road_index
        self.high_threshold = high_threshold
        known = set(self.provinces)
        self._check_keys("cultivation", cultivation["district_id"], known)
        self.cultivation = cultivation.assign(district_id=cultivation["district_id"].astype(str)).set_index(
            ["district_id", "year"]).sort_index()
        self.cov_cols: tuple[str, ...] = ()
        self.cov = None
        if covariates is not None:
            self._check_keys("covariates", covariates["district_id"], known)
            keys = ["district_id", "year"] if "year" in covariates.columns else ["district_id"]
            self.cov_cols = tuple(c for c in covariates.columns if c not in keys)
            self.cov = covariates.assign(district_id=covariates["district_id"].astype(str)).set_index(keys)
        self._check_keys("control", pd.Series(list(self.taliban)), known)
        self.events_by_district: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self.events = events
        if events is not None and len(events):
            self._check_keys("events", events["district_id"], known)
            for d, g in events.groupby("district_id"):
                self.events_by_district[str(d)] = (g["week_start"].to_numpy(), g["week_end"].to_numpy(),
                                                   g["deaths"].to_numpy())
        self._static: dict[tuple[str, int], dict] = {}

    @staticmethod
    def _check_keys(name: str, ids: pd.Series, known: set):
        unknown = sorted(set(map(str, ids)) - known)
        if unknown:
            raise PanelError(f"{name}: district ids not in the geometry: {unknown[:10]}"
                             + (" ..." if len(unknown) > 10 else ""))

    def _violence(self, district_id: str, t0: dt.date, days: int = 30):
        ev = self.events_by_district.get(district_id)
        if ev is None:
            return 0, 0
        ws, we, deaths = ev
        lo, hi = t0 - dt.timedelta(days=days), t0 - dt.timedelta(days=1)
        hit = (ws <= hi) & (we >= lo)
        return int(hit.sum()), int(deaths[hit].sum())

    def _static_row(self, d: str, y: int):
        key = (d, y)
        if key in self._static:
            return self._static[key]
        row = None
        reason = None
        if key not in self.cultivation.index:
            reason = "no_cultivation_data"
        elif d not in self.taliban:
            reason = "no_control_data"
        else:
            c = self.cultivation.loc[key]
            poppy = float(c["poppy_ha"])
            cls = classify_cultivation(poppy, self.high_threshold)
            erad = None
            if "eradicated_ha" in c.index and not pd.isna(c["eradicated_ha"]):
                erad = eradication_pct(poppy, float(c["eradicated_ha"]))
            cov = {}
            if self.cov is not None:
                ck = (d, y) if self.cov.index.nlevels == 2 else d
                if ck not in self.cov.index:
                    reason = "no_covariates"
                else:
                    vals = self.cov.loc[ck]
                    cov = {k: float(vals[k]) for k in self.cov_cols}
                    if not all(np.isfinite(v) for v in cov.values()):
                        reason = "nonfinite_covariates"
            row = {"district_id": d, "province_id": self.provinces[d], "year": y, "poppy_ha": poppy,
                   "cultivation_class": cls, "high": int(cls == "high"), "low": int(cls == "low"),
                   "taliban": int(self.taliban[d]), "eradication_pct": erad,
                   "log_poppy": math.log1p(poppy), **cov}
        self._static[key] = (row, reason)
        return row, reason

    def build(self, peaks: pd.DataFrame, cfg: PanelConfig = PanelConfig(), keep_series: bool = False,
              road_violence: bool | None = None) -> Panel:
        """One row per district-year with a peak, enough baseline days and a harvest window."""
        if cfg.lag not in self.metrics:
            raise PanelError(f"no metrics computed for lag {cfg.lag}")
        self._check_keys("peaks", peaks["district_id"], set(self.provinces))
        m = self.metrics[cfg.lag]
        series, valid = m.outcome(cfg.outcome)
        dindex = {d: i for i, d in enumerate(self.district_ids)}
        use_road = self.road_index is not None if road_violence is None else road_violence
        rows, dropped, kept_series = [], [], []
        for pk in peaks.itertuples(index=False):
            d, y = str(pk.district_id), int(pk.year)
            t0 = pk.t0 if isinstance(pk.t0, dt.date) else pd.Timestamp(pk.t0).date()
            static, reason = self._static_row(d, y)
            if reason is None and d not in dindex:
                reason = "no_towers"
            if reason is None:
                i = dindex[d]
                if m.present[i].sum() == 0:
                    reason = "no_towers"
            if reason is not None:
                dropped.append({"district_id": d, "year": y, "reason": reason})
                continue
            ti = self.calendar.index(t0)
            e, base, reason = outcome_for(series[i], valid[i], ti, cfg)
            if reason is not None:
                dropped.append({"district_id": d, "year": y, "reason": reason})
                continue
            n_ev, deaths = self._violence(d, t0)
            row = dict(static)
            row.update({
                "t0": t0, "period": int(pk.period), "majority_share": float(pk.majority_share),
                "outcome": e, "m_base": base,
                "violence": int(n_ev > 0), "violence_events": n_ev, "violence_deaths": deaths,
                "violence_gt2": int(n_ev > 2), "violence_deaths10": int(deaths >= 10),
            })
            if use_road:
                row["road_violence"] = int(self.road_index.flag(d, t0, self.events))
            rows.append(row)
            if keep_series:
                kept_series.append(self.outcome_series(d, y, t0, cfg, base))
        frame = pd.DataFrame(rows)
        if len(frame):
            frame = frame.sort_values(["district_id", "year"], kind="stable").reset_index(drop=True)
        return Panel(frame, pd.DataFrame(dropped, columns=["district_id", "year", "reason"]), cfg,
                     self.cov_cols, kept_series)

    def outcome_series(self, district_id: str, year: int, t0: dt.date, cfg: PanelConfig, base: float,
                       before: int = 120, after: int = 90) -> OutcomeSeries:
        m = self.metrics[cfg.lag]
        series, valid = m.outcome(cfg.outcome)
        i = self.district_ids.index(district_id)
        ti = self.calendar.index(t0)
        offs = np.arange(-before, after + 1)
        idx = ti + offs
        ok = (idx >= 0) & (idx < series.shape[1])
        vals = np.full(offs.shape, np.nan)
        vals[ok] = np.where(valid[i, idx[ok]], series[i, idx[ok]] - base, np.nan)
        return OutcomeSeries(district_id, year, t0, base, offs, vals)


PANEL_COLUMNS = [
    "district_id", "province_id", "year", "t0", "period", "majority_share", "outcome", "m_base", "poppy_ha",
    "log_poppy", "cultivation_class", "high", "low", "violence", "violence_events", "violence_deaths",
    "violence_gt2", "violence_deaths10", "road_violence", "taliban", "eradication_pct",
]


def panel_to_csv(panel: Panel, path, header_comment: str | None = None):
    cols = [c for c in PANEL_COLUMNS if c in panel.frame.columns] + list(panel.covariates)
    with open(path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        panel.frame.reindex(columns=cols).to_csv(fh, index=False, lineterminator="\n")


def read_panel_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, comment="#", dtype={"district_id": str, "province_id": str})
    df["t0"] = pd.to_datetime(df["t0"]).dt.date
    return df
