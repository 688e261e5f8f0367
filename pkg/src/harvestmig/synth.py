"""Synthetic world with known migration pulses, phenology and violence.

Districts are squares on a regular grid. The top ``reservoir_rows`` rows
are non-agricultural labour reservoirs: they supply the harvest migrants,
have no cropland pixels (so they never receive a peak date) and never
enter the analysis panel. Migrant pulses therefore leave the in-rates of
panel districts untouched except in the destination.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from .calendar import SECONDS_PER_DAY, StudyCalendar, iso_week_label
from .geo import LocalProjection
from .ingest import DistrictGeometry, districts_to_geojson
from .phenology import N_PERIODS, PERIOD_DAYS, period_start
from .spatial import Road, RoadNetwork

COVARIATE_NAMES = (
    "log_land_area", "log_other_cultivation", "population", "provincial_capital", "frac_cultivated",
    "road_density", "frac_built_up", "frac_tracks", "health_per_100k", "ethnic_diversity", "frac_barren",
)
NDVI_LO, NDVI_HI = 0.05, 0.85
BLOCK = 4096


class WorldConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    seed: int = 0
    nx: int = 6
    ny: int = 6
    reservoir_rows: int = 1
    district_km: float = 20.0
    province_block: int = 2
    lon0: float = 65.0
    lat0: float = 33.0
    towers_per_district: int = 3
    subscribers_per_district: int = 2000
    obs_prob: float = 0.9
    min_obs_share: float = 0.8
    extra_events: float = 0.5
    move_prob_30d: float = 0.01
    years: tuple[int, ...] = (2015, 2016)
    share_high: float = 1 / 3
    share_low: float = 1 / 3
    amplitude: float = 0.03
    low_amplitude: float = 0.0
    pulse_offset: int = 19
    stay_days: tuple[int, int] = (12, 12)
    return_prob: float = 0.62
    peak_periods: tuple[int, int] = (4, 9)
    pixels_per_district: int = 25
    agriculture_share: float = 0.8
    ndvi_noise: float = 0.05
    noisy_share: float = 0.0
    noisy_sigma: float = 0.4
    season_width: float = 30.0
    violence_rate: float = 0.05
    violence_coupling: float = 0.0
    taliban_share: float = 0.3
    n_roads: int = 4

    def __post_init__(self):
        self.years = tuple(int(y) for y in self.years)
        self.stay_days = tuple(int(s) for s in self.stay_days)
        self.peak_periods = tuple(int(p) for p in self.peak_periods)
        self.validate()

    def validate(self):
        rates = ("obs_prob", "min_obs_share", "move_prob_30d", "share_high", "share_low", "return_prob",
                 "agriculture_share", "violence_rate", "taliban_share", "noisy_share", "violence_coupling")
        for name in rates:
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise WorldConfigError(f"{name}={v} outside [0, 1]")
        if self.amplitude < 0 or self.low_amplitude < 0:
            raise WorldConfigError("pulse amplitudes must be >= 0")
        if self.amplitude + self.move_prob_30d >= 1 or self.low_amplitude + self.move_prob_30d >= 1:
            raise WorldConfigError("amplitude + baseline migration must stay below 1")
        if self.share_high + self.share_low > 1:
            raise WorldConfigError("share_high + share_low > 1")
        if self.obs_prob < self.min_obs_share:
            raise WorldConfigError("obs_prob below the observed-day floor")
        if not 0 < self.reservoir_rows < self.ny:
            raise WorldConfigError("need at least one reservoir row and one panel row")
        if self.nx < 1 or self.subscribers_per_district < 1 or self.towers_per_district < 1:
            raise WorldConfigError("grid, subscribers and towers must be positive")
        lo, hi = self.stay_days
        if not 1 <= lo <= hi:
            raise WorldConfigError("stay_days must satisfy 1 <= lo <= hi")
        p0, p1 = self.peak_periods
        if not 1 <= p0 <= p1 <= 12:
            raise WorldConfigError("peak_periods must lie within the spring periods 1..12")
        if not self.years or sorted(set(self.years)) != list(self.years):
            raise WorldConfigError("years must be strictly increasing")
        if self.ndvi_noise < 0 or self.noisy_sigma < 0 or self.season_width <= 0:
            raise WorldConfigError("NDVI noise must be >= 0 and season width > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise WorldConfigError(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @property
    def n_districts(self) -> int:
        return self.nx * self.ny

    def calendar(self) -> StudyCalendar:
        # Room for a January placebo peak: baseline 120 days back plus the 30-day lag and warm-up.
        return StudyCalendar(dt.date(self.years[0] - 1, 7, 15), dt.date(self.years[-1], 8, 15))


@dataclass
class GroundTruth:
    peaks: pd.DataFrame       # district_id, year, period, t0 (agricultural districts only)
    pulses: pd.DataFrame      # district_id, year, start, migrants, population, injected, realized, return_share
    origin_mix: dict          # "district|year" -> {source district: share}

    def excess(self, district_id: str, year: int) -> float:
        p = self.pulses[(self.pulses["district_id"] == district_id) & (self.pulses["year"] == year)]
        return float(p["injected"].iloc[0]) if len(p) else 0.0

    def to_json(self) -> dict:
        peaks = self.peaks.assign(t0=self.peaks["t0"].astype(str))
        pulses = self.pulses.assign(start=self.pulses["start"].astype(str))
        return {"peaks": peaks.to_dict("records"), "pulses": pulses.to_dict("records"),
                "origin_mix": self.origin_mix}

    @classmethod
    def from_json(cls, doc: dict) -> "GroundTruth":
        peaks = pd.DataFrame(doc["peaks"])
        if len(peaks):
            peaks["t0"] = pd.to_datetime(peaks["t0"]).dt.date
        pulses = pd.DataFrame(doc["pulses"])
        if len(pulses):
            pulses["start"] = pd.to_datetime(pulses["start"]).dt.date
        return cls(peaks, pulses, doc.get("origin_mix", {}))


@dataclass
class World:
    config: WorldConfig
    calendar: StudyCalendar
    districts: list[DistrictGeometry]
    reservoir: list[str]
    towers: pd.DataFrame
    tower_district: np.ndarray
    cultivation: pd.DataFrame
    control: pd.DataFrame
    covariates: pd.DataFrame
    population: pd.DataFrame
    ndvi: pd.DataFrame
    violence: pd.DataFrame
    roads: RoadNetwork
    truth: GroundTruth
    loc: np.ndarray                  # (subscriber x day) true district index
    subscriber_ids: np.ndarray
    _obs_cache: dict = field(default_factory=dict, repr=False)

    @property
    def district_ids(self) -> list[str]:
        return [d.district_id for d in self.districts]

    @property
    def provinces(self) -> dict[str, str]:
        return {d.district_id: d.province_id for d in self.districts}

    @property
    def taliban(self) -> dict[str, bool]:
        return {r.district_id: bool(r.taliban) for r in self.control.itertuples(index=False)}

    def observed_blocks(self, block: int = BLOCK) -> Iterator[tuple[slice, np.ndarray]]:
        """(row slice, observed-day mask) per subscriber block; reproducible."""
        n = self.loc.shape[0]
        for b, lo in enumerate(range(0, n, block)):
            sl = slice(lo, min(lo + block, n))
            yield sl, _observed_mask(self.config, b, sl.stop - sl.start, self.calendar.n_days)


# ---------------------------------------------------------------------------
# building blocks

def phenology_curve(day, peak_day, amplitude: float = NDVI_HI - NDVI_LO, width: float = 30.0,
                    noise=0.0, base: float = NDVI_LO):
    """Symmetric double-logistic season peaking at ``peak_day`` plus noise.

    Noiseless values lie in [base, base + amplitude] with the maximum at the peak.
    """
    t = np.asarray(day, dtype=float) - np.asarray(peak_day, dtype=float)
    # green-up and senescence inflections sit width/2 either side of the peak
    half, s = width / 2.0, width / 6.0
    norm = 2.0 / (1.0 + np.exp(-half / s)) - 1.0
    g = (1.0 / (1.0 + np.exp(-(t + half) / s)) + 1.0 / (1.0 + np.exp(-(half - t) / s)) - 1.0) / norm
    return np.clip(base + amplitude * g + noise, -1.0, 1.0)


def truncated_noise(rng: np.random.Generator, sigma: float, size, bound: float = 3.0) -> np.ndarray:
    """Gaussian noise truncated to +-bound*sigma by redrawing."""
    x = rng.normal(0.0, 1.0, size)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.normal(0.0, 1.0, int(bad.sum()))
        bad = np.abs(x) > bound
    return sigma * x


def period_composites(peak_doy: np.ndarray, width: float, amplitude: np.ndarray, year: int) -> np.ndarray:
    """Maximum-value composite of the noiseless curve over each 16-day period."""
    n_year = 366 if (year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)) else 365
    days = np.arange(n_year, dtype=float)
    curve = phenology_curve(days[None, :], np.asarray(peak_doy, float)[:, None],
                            np.asarray(amplitude, float)[:, None], width)
    edges = np.arange(0, N_PERIODS * PERIOD_DAYS, PERIOD_DAYS)
    return np.maximum.reduceat(curve, edges, axis=1)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _observed_mask(cfg: WorldConfig, block: int, n_rows: int, n_days: int) -> np.ndarray:
    rng = _rng(cfg.seed, 101, block)
    obs = rng.random((n_rows, n_days)) < cfg.obs_prob
    floor = int(np.ceil(cfg.min_obs_share * n_days))
    short = np.flatnonzero(obs.sum(axis=1) < floor)
    for r in short:
        missing = np.flatnonzero(~obs[r])
        need = floor - int(obs[r].sum())
        obs[r, rng.choice(missing, need, replace=False)] = True
    return obs


def _grid(cfg: WorldConfig):
    proj = LocalProjection(cfg.lon0, cfg.lat0)
    side = cfg.district_km
    x0 = -cfg.nx * side / 2
    y0 = -cfg.ny * side / 2
    geoms, reservoir = [], []
    width = len(str(cfg.n_districts))
    pcols = -(-cfg.nx // cfg.province_block)
    for j in range(cfg.ny):
        for i in range(cfg.nx):
            k = j * cfg.nx + i
            did = f"D{k + 1:0{max(width, 2)}d}"
            prov = (j // cfg.province_block) * pcols + i // cfg.province_block
            xs = [x0 + i * side, x0 + (i + 1) * side, x0 + (i + 1) * side, x0 + i * side, x0 + i * side]
            ys = [y0 + j * side, y0 + j * side, y0 + (j + 1) * side, y0 + (j + 1) * side, y0 + j * side]
            lon, lat = proj.inverse(np.array(xs), np.array(ys))
            ring = np.round(np.column_stack([lon, lat]), 9)
            geoms.append(DistrictGeometry(did, f"P{prov + 1:02d}", [[ring]]))
            if j >= cfg.ny - cfg.reservoir_rows:
                reservoir.append(did)
    return proj, geoms, reservoir


def _towers(cfg: WorldConfig, proj: LocalProjection, rng) -> tuple[pd.DataFrame, np.ndarray]:
    side = cfg.district_km
    x0, y0 = -cfg.nx * side / 2, -cfg.ny * side / 2
    rows, dist = [], []
    k = 0
    for j in range(cfg.ny):
        for i in range(cfg.nx):
            # Keep towers well inside the square and apart from each other.
            u = rng.uniform(0.15, 0.85, (cfg.towers_per_district, 2))
            u[:, 0] = (u[:, 0] + np.arange(cfg.towers_per_district)) / cfg.towers_per_district * 0.7 + 0.15
            xs = x0 + (i + u[:, 0]) * side
            ys = y0 + (j + u[:, 1]) * side
            lon, lat = proj.inverse(xs, ys)
            for a, b in zip(lon, lat):
                k += 1
                rows.append((f"T{k:05d}", round(float(a), 7), round(float(b), 7)))
                dist.append(j * cfg.nx + i)
    return pd.DataFrame(rows, columns=["tower_id", "lon", "lat"]), np.array(dist, dtype=np.int16)


def _subscriber_ids(seed: int, n: int) -> np.ndarray:
    return np.array([hashlib.blake2b(f"{seed}:{s}".encode(), digest_size=8).hexdigest() for s in range(n)],
                    dtype=object)


def _baseline_moves(cfg: WorldConfig, n_subs: int, n_days: int, n_districts: int, rng) -> np.ndarray:
    home = np.repeat(np.arange(n_districts, dtype=np.int16), cfg.subscribers_per_district)
    loc = np.repeat(home[:, None], n_days, axis=1)
    hz = 1.0 - (1.0 - cfg.move_prob_30d) ** (1.0 / 30.0)
    n_moves = rng.binomial(n_days - 1, hz, n_subs)
    subs = np.repeat(np.arange(n_subs), n_moves)
    days = rng.integers(1, n_days, subs.size)
    offs = rng.integers(1, n_districts, subs.size)
    order = np.lexsort((days, subs))
    for s, t, o in zip(subs[order], days[order], offs[order]):
        cur = loc[s, t - 1]
        loc[s, t:] = (cur + o) % n_districts
    return loc


def _ndvi(cfg: WorldConfig, ids: list[str], reservoir: set[str], peaks: pd.DataFrame, rng) -> pd.DataFrame:
    sigma = np.full(len(ids), cfg.ndvi_noise)
    noisy = rng.random(len(ids)) < cfg.noisy_share
    sigma[noisy] = cfg.noisy_sigma
    frames = []
    n = cfg.pixels_per_district
    for pk in peaks.itertuples(index=False):
        k = ids.index(pk.district_id)
        start_doy = (pk.t0 - dt.date(pk.year, 1, 1)).days
        peak_doy = start_doy + rng.integers(0, PERIOD_DAYS, n)
        if pk.district_id in reservoir:
            is_ag = np.zeros(n, dtype=bool)
        else:
            is_ag = rng.random(n) < cfg.agriculture_share
            is_ag[0] = True
        amp = np.where(is_ag, NDVI_HI - NDVI_LO, 0.2)
        comp = period_composites(peak_doy, cfg.season_width, amp, pk.year)
        comp = np.clip(comp + truncated_noise(rng, sigma[k], comp.shape), -1.0, 1.0)
        pix = np.array([f"{pk.district_id}-{p:03d}" for p in range(n)])
        frames.append(pd.DataFrame({
            "pixel_id": np.repeat(pix, N_PERIODS), "district_id": pk.district_id,
            "is_agriculture": np.repeat(is_ag.astype(int), N_PERIODS), "year": pk.year,
            "period": np.tile(np.arange(1, N_PERIODS + 1), n), "ndvi": np.round(comp.ravel(), 5),
        }))
    return pd.concat(frames, ignore_index=True)


def _violence(cfg: WorldConfig, geoms, cal: StudyCalendar, high_t0: dict, rng) -> pd.DataFrame:
    rows = []
    first = cal.start + dt.timedelta(days=(7 - cal.start.weekday()) % 7)
    mondays = [first + dt.timedelta(days=7 * w) for w in range((cal.end - first).days // 7 + 1)]
    k = 0
    for g in geoms:
        lon0, lat0, lon1, lat1 = g.bbox
        pad_lon, pad_lat = 0.25 * (lon1 - lon0), 0.25 * (lat1 - lat0)
        for monday in mondays:
            p = cfg.violence_rate
            for t0 in high_t0.get(g.district_id, []):
                if 0 < (t0 - monday).days <= 30:
                    p = min(1.0, p + cfg.violence_coupling)
            if rng.random() >= p:
                continue
            k += 1
            precision = rng.choice(["exact", "radius25km", "district"], p=[0.5, 0.3, 0.2])
            if precision == "district":
                lon, lat = g.centroid()
            else:
                lon = rng.uniform(lon0 - pad_lon, lon1 + pad_lon)
                lat = rng.uniform(lat0 - pad_lat, lat1 + pad_lat)
            rows.append({"event_id": f"E{k:06d}", "district_id": g.district_id, "iso_week": iso_week_label(monday),
                         "deaths": int(1 + rng.poisson(1.5)), "lon": round(float(lon), 6),
                         "lat": round(float(lat), 6), "precision": str(precision)})
    return pd.DataFrame(rows, columns=["event_id", "district_id", "iso_week", "deaths", "lon", "lat", "precision"])


def _roads(cfg: WorldConfig, proj: LocalProjection, rng) -> RoadNetwork:
    side = cfg.district_km
    hx, hy = cfg.nx * side / 2, cfg.ny * side / 2
    roads = []
    for r in range(cfg.n_roads):
        n = 5
        if r % 2 == 0:
            xs = np.linspace(-hx - 5, hx + 5, n)
            ys = rng.uniform(-hy, hy) + rng.normal(0, 0.1 * side, n)
        else:
            ys = np.linspace(-hy - 5, hy + 5, n)
            xs = rng.uniform(-hx, hx) + rng.normal(0, 0.1 * side, n)
        lon, lat = proj.inverse(xs, ys)
        roads.append(Road(f"R{r + 1:02d}", np.round(np.column_stack([lon, lat]), 7)))
    return RoadNetwork(roads)


def _true_rates(loc: np.ndarray, n_districts: int, lag: int = 30) -> np.ndarray:
    """In-rate from the true location matrix (no observation process)."""
    n_days = loc.shape[1]
    rate = np.full((n_districts, n_days), np.nan)
    for t in range(lag, n_days):
        cur, ref = loc[:, t], loc[:, t - lag]
        present = np.bincount(cur, minlength=n_districts)
        movers = np.bincount(cur[cur != ref], minlength=n_districts)
        with np.errstate(divide="ignore", invalid="ignore"):
            rate[:, t] = movers / present
    return rate


# ---------------------------------------------------------------------------

def build_world(cfg: WorldConfig) -> World:
    """Generate every input table plus the true location matrix."""
    cal = cfg.calendar()
    rng = _rng(cfg.seed, 1)
    proj, geoms, reservoir = _grid(cfg)
    ids = [g.district_id for g in geoms]
    res_idx = np.array([ids.index(r) for r in reservoir])
    panel_ids = [d for d in ids if d not in set(reservoir)]
    towers, tower_district = _towers(cfg, proj, _rng(cfg.seed, 2))

    # cultivation classes are fixed per district; hectares vary by year
    crng = _rng(cfg.seed, 3)
    n_panel = len(panel_ids)
    n_high = int(round(cfg.share_high * n_panel))
    n_low = int(round(cfg.share_low * n_panel))
    classes = np.array(["high"] * n_high + ["low"] * n_low + ["none"] * (n_panel - n_high - n_low))
    crng.shuffle(classes)
    cls_of = dict(zip(panel_ids, classes))
    cls_of.update({r: "none" for r in reservoir})
    cult_rows = []
    for d in ids:
        for y in cfg.years:
            c = cls_of[d]
            ha = {"high": crng.uniform(1000, 7000), "low": crng.uniform(1, 999), "none": 0.0}[c]
            ha = float(np.floor(ha)) if c != "none" else 0.0
            ha = max(ha, 1000.0) if c == "high" else (min(max(ha, 1.0), 999.0) if c == "low" else 0.0)
            u = crng.uniform(0, 0.2)
            if ha > 0:
                erad = float(np.floor(ha * u))
            else:
                # some districts with no standing crop were fully eradicated
                erad = float(np.floor(1000 * u)) if u > 0.1 else 0.0
            cult_rows.append({"district_id": d, "year": y, "poppy_ha": ha, "eradicated_ha": erad})
    cultivation = pd.DataFrame(cult_rows)
    trng = _rng(cfg.seed, 4)
    control = pd.DataFrame({"district_id": ids, "taliban": (trng.random(len(ids)) < cfg.taliban_share).astype(int)})

    prng = _rng(cfg.seed, 5)
    peak_rows = []
    for d in ids:
        for y in cfg.years:
            p = int(prng.integers(cfg.peak_periods[0], cfg.peak_periods[1] + 1))
            peak_rows.append({"district_id": d, "year": y, "period": p, "t0": period_start(y, p)})
    peaks = pd.DataFrame(peak_rows)

    n_subs = cfg.subscribers_per_district * len(ids)
    mrng = _rng(cfg.seed, 6)
    loc = _baseline_moves(cfg, n_subs, cal.n_days, len(ids), mrng)
    loc, pulses, origin = _inject_pulses(cfg, cal, loc, ids, res_idx, cls_of, peaks, _rng(cfg.seed, 7))

    ndvi = _ndvi(cfg, ids, set(reservoir), peaks, _rng(cfg.seed, 8))
    high_t0: dict[str, list] = {}
    for pk in peaks.itertuples(index=False):
        if cls_of[pk.district_id] == "high":
            high_t0.setdefault(pk.district_id, []).append(pk.t0)
    violence = _violence(cfg, geoms, cal, high_t0, _rng(cfg.seed, 9))
    roads = _roads(cfg, proj, _rng(cfg.seed, 10))

    vrng = _rng(cfg.seed, 11)
    pop = np.round(vrng.uniform(13500, 145000, len(ids)))
    land = np.log(cfg.district_km ** 2) + vrng.normal(0, 0.05, len(ids))
    covariates = pd.DataFrame({
        "district_id": ids,
        "log_land_area": np.round(land, 6),
        "log_other_cultivation": np.round(vrng.normal(5, 1, len(ids)), 6),
        "population": pop / 1e5,
        "provincial_capital": (vrng.random(len(ids)) < 0.2).astype(int),
        "frac_cultivated": np.round(vrng.uniform(0, 0.6, len(ids)), 6),
        "road_density": np.round(vrng.uniform(0, 2, len(ids)), 6),
        "frac_built_up": np.round(vrng.uniform(0, 0.1, len(ids)), 6),
        "frac_tracks": np.round(vrng.uniform(0, 0.3, len(ids)), 6),
        "health_per_100k": np.round(vrng.uniform(0, 10, len(ids)), 6),
        "ethnic_diversity": np.round(vrng.uniform(0, 1, len(ids)), 6),
        "frac_barren": np.round(vrng.uniform(0, 0.7, len(ids)), 6),
    })
    population = pd.DataFrame([{"district_id": d, "year": y, "population": int(pop[k])}
                               for k, d in enumerate(ids) for y in cfg.years])

    rate = _true_rates(loc, len(ids))
    realized = []
    for p in pulses:
        k = ids.index(p["district_id"])
        a = cal.index(p["start"])
        t0 = cal.index(p["t0"])
        base = np.nanmean(rate[k, t0 - 120:t0 - 30])
        realized.append(float(np.nanmean(rate[k, a:a + 7]) - base))
    pulse_df = pd.DataFrame(pulses, columns=["district_id", "year", "t0", "start", "migrants", "population",
                                             "injected", "return_share"])
    pulse_df["realized"] = realized
    pulse_df = pulse_df.drop(columns=["t0"])
    # reservoirs carry no cropland, so no peak is planted there
    planted = peaks[~peaks["district_id"].isin(reservoir)].reset_index(drop=True)
    truth = GroundTruth(planted, pulse_df, origin)
    return World(cfg, cal, geoms, reservoir, towers, tower_district, cultivation, control, covariates,
                 population, ndvi, violence, roads, truth, loc, _subscriber_ids(cfg.seed, n_subs))


def _inject_pulses(cfg, cal, loc, ids, res_idx, cls_of, peaks, rng):
    """Move reservoir subscribers into harvest districts for a short stay."""
    pulses, origin = [], {}
    q = cfg.move_prob_30d
    reservoir = set(res_idx.tolist())
    for y in cfg.years:
        busy = np.zeros(loc.shape[0], dtype=bool)
        for pk in peaks[peaks["year"] == y].sort_values("district_id").itertuples(index=False):
            cls = cls_of[pk.district_id]
            amp = cfg.amplitude if cls == "high" else cfg.low_amplitude if cls == "low" else 0.0
            if amp <= 0 or pk.district_id not in cls_of or ids.index(pk.district_id) in reservoir:
                continue
            h = ids.index(pk.district_id)
            a = cal.index(pk.t0) + cfg.pulse_offset
            if a < 1 or a + cfg.stay_days[1] > cal.n_days:
                raise WorldConfigError(f"pulse for {pk.district_id}/{y} falls outside the calendar")
            n_h = int((loc[:, a - 1] == h).sum())
            m = int(round(amp * n_h / (1 - q - amp)))
            pool = np.flatnonzero(np.isin(loc[:, a - 1], res_idx) & ~busy)
            if m > pool.size:
                raise WorldConfigError("reservoir too small for the configured pulses")
            chosen = np.sort(rng.choice(pool, m, replace=False))
            busy[chosen] = True
            stays = rng.integers(cfg.stay_days[0], cfg.stay_days[1] + 1, m)
            returns = rng.random(m) < cfg.return_prob
            src = loc[chosen, a - 1].copy()
            for s, st, ret, o in zip(chosen, stays, returns, src):
                loc[s, a:a + st] = h
                if not ret:
                    others = [r for r in res_idx if r != o]
                    if others:
                        loc[s, a + st:] = others[int(rng.integers(len(others)))]
            srcs, counts = np.unique(src, return_counts=True)
            origin[f"{pk.district_id}|{y}"] = {ids[int(s)]: float(c / m) for s, c in zip(srcs, counts)} if m else {}
            pulses.append({"district_id": pk.district_id, "year": int(y), "t0": pk.t0, "start": cal.date(a),
                           "migrants": m, "population": n_h, "injected": float(amp),
                           "return_share": float(returns.mean()) if m else float("nan")})
    return loc, pulses, origin


# ---------------------------------------------------------------------------
# file output

def _write_events(world: World, out_dir: Path, block: int = BLOCK) -> list[str]:
    cfg, cal = world.config, world.calendar
    ev_dir = out_dir / "events"
    ev_dir.mkdir(parents=True, exist_ok=True)
    by_district = [np.flatnonzero(world.tower_district == k) for k in range(cfg.n_districts)]
    n_t = np.array([len(b) for b in by_district])
    first_t = np.array([b[0] for b in by_district])
    tower_ids = world.towers["tower_id"].to_numpy(dtype=object)
    files = []
    for b, (sl, obs) in enumerate(world.observed_blocks(block)):
        rng = _rng(cfg.seed, 102, b)
        r, t = np.nonzero(obs)
        dist = world.loc[sl][r, t].astype(np.int64)
        n_ev = 1 + rng.poisson(cfg.extra_events, r.size)
        r, t, dist = np.repeat(r, n_ev), np.repeat(t, n_ev), np.repeat(dist, n_ev)
        secs = rng.integers(0, SECONDS_PER_DAY, r.size)
        ts = (cal.start_epoch_day + t).astype(np.int64) * SECONDS_PER_DAY + secs
        tw = tower_ids[first_t[dist] + rng.integers(0, 1 << 30, r.size) % n_t[dist]]
        order = np.lexsort((ts, r))
        stamps = pc.strftime(pa.array(ts[order], pa.timestamp("s")), format="%Y-%m-%dT%H:%M:%SZ")
        tbl = pa.table({"subscriber_id": pa.array(world.subscriber_ids[sl][r[order]], pa.string()),
                        "timestamp": stamps, "tower_id": pa.array(tw[order], pa.string())})
        path = ev_dir / f"events_{b:04d}.csv"
        pacsv.write_csv(tbl, path, pacsv.WriteOptions(quoting_style="none"))
        files.append(str(path))
    return files


def write_world(world: World, out_dir: str | os.PathLike, events: bool = True) -> dict[str, str]:
    """Write every pipeline input plus ground_truth.json; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "districts": out / "districts.geojson", "towers": out / "towers.csv", "ndvi": out / "ndvi.csv",
        "cultivation": out / "cultivation.csv", "violence": out / "violence.csv", "control": out / "control.csv",
        "covariates": out / "covariates.csv", "population": out / "population.csv", "roads": out / "roads.geojson",
        "ground_truth": out / "ground_truth.json", "world": out / "world.json",
    }
    with open(paths["districts"], "w") as fh:
        json.dump(districts_to_geojson(world.districts), fh)
    with open(paths["roads"], "w") as fh:
        json.dump(world.roads.to_geojson(), fh)
    csv_kw = {"index": False, "lineterminator": "\n"}
    world.towers.to_csv(paths["towers"], **csv_kw)
    world.ndvi.to_csv(paths["ndvi"], **csv_kw)
    world.cultivation.to_csv(paths["cultivation"], **csv_kw)
    world.violence.to_csv(paths["violence"], **csv_kw)
    world.control.to_csv(paths["control"], **csv_kw)
    world.covariates.to_csv(paths["covariates"], **csv_kw)
    world.population.to_csv(paths["population"], **csv_kw)
    with open(paths["ground_truth"], "w") as fh:
        json.dump(world.truth.to_json(), fh, indent=1, sort_keys=True)
    with open(paths["world"], "w") as fh:
        json.dump({"config": world.config.to_dict(), "study_start": str(world.calendar.start),
                   "study_end": str(world.calendar.end)}, fh, indent=1, sort_keys=True)
    result = {k: str(v) for k, v in paths.items()}
    if events:
        _write_events(world, out)
        result["events"] = str(out / "events")
    return result


def generate_world(cfg: WorldConfig, out_dir: str | os.PathLike | None = None,
                   events: bool = True) -> tuple[World, GroundTruth]:
    world = build_world(cfg)
    if out_dir is not None:
        write_world(world, out_dir, events=events)
    return world, world.truth
