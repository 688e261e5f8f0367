"""Peak-NDVI dating of district-year growing seasons from 16-day composites."""

from __future__ import annotations

import datetime as dt
import zlib
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
import pandas as pd

N_PERIODS = 23
SPRING_PERIODS = 12
PERIOD_DAYS = 16
VEGETATION_THRESHOLD = 0.3

NDVI_COLUMNS = ["pixel_id", "district_id", "is_agriculture", "year", "period", "ndvi"]
PEAK_COLUMNS = ["district_id", "year", "period", "t0", "majority_share", "qualifying_pixels"]


@dataclass
class NdviSeries:
    pixel_id: str
    district_id: str
    is_agriculture: bool
    year: int
    values: np.ndarray  # 23 composites, period 1 first

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (N_PERIODS,):
            raise ValueError(f"pixel {self.pixel_id}: expected {N_PERIODS} values, got {self.values.shape}")
        finite = self.values[np.isfinite(self.values)]
        if np.any((finite < -1) | (finite > 1)):
            raise ValueError(f"pixel {self.pixel_id}: NDVI outside [-1, 1]")


@dataclass(frozen=True)
class PeakDate:
    district_id: str
    year: int
    period_index: int
    t0: dt.date
    majority_share: float
    qualifying_pixels: int = 0
    clamped: bool = False


def period_start(year: int, period: int) -> dt.date:
    """First day of a 16-day composite period (period 1 starts on Jan 1)."""
    if not 1 <= period <= N_PERIODS:
        raise ValueError(f"period {period} outside 1..{N_PERIODS}")
    return dt.date(year, 1, 1) + dt.timedelta(days=PERIOD_DAYS * (period - 1))


def period_of(day: dt.date) -> int:
    doy = day.timetuple().tm_yday
    return min(1 + (doy - 1) // PERIOD_DAYS, N_PERIODS)


def pixel_peak_windows(values: np.ndarray, is_agriculture: np.ndarray,
                       threshold: float = VEGETATION_THRESHOLD, n_periods: int = SPRING_PERIODS) -> np.ndarray:
    """Vectorised spring argmax per pixel (1-based); 0 where the pixel does not qualify."""
    v = np.asarray(values, dtype=float)[:, :n_periods]
    v = np.where(np.isfinite(v), v, -np.inf)
    best = v.max(axis=1)
    arg = v.argmax(axis=1) + 1  # first maximum -> earliest period on ties
    ok = np.asarray(is_agriculture, dtype=bool) & (best > threshold)
    return np.where(ok, arg, 0)


def pixel_peak_window(series: NdviSeries, threshold: float = VEGETATION_THRESHOLD) -> int | None:
    """Spring period holding the pixel's maximum, or None when it does not qualify."""
    p = int(pixel_peak_windows(series.values[None, :], np.array([series.is_agriculture]), threshold)[0])
    return p or None


def district_peak_date(votes: Iterable[int], district_id: str = "", year: int = 2000) -> PeakDate | None:
    """Modal peak period over qualifying pixels; ties go to the earlier period."""
    v = np.asarray([x for x in votes if x], dtype=int)
    if v.size == 0:
        return None
    counts = np.bincount(v, minlength=SPRING_PERIODS + 1)
    p = int(counts.argmax())
    return PeakDate(district_id, int(year), p, period_start(int(year), p), counts[p] / v.size, int(v.size))


def peaks_from_frame(ndvi: pd.DataFrame, threshold: float = VEGETATION_THRESHOLD):
    """Long-format NDVI -> (peaks DataFrame, excluded district-years DataFrame)."""
    missing = set(NDVI_COLUMNS) - set(ndvi.columns)
    if missing:
        raise ValueError(f"NDVI input missing columns {sorted(missing)}")
    df = ndvi[NDVI_COLUMNS]
    if df["period"].min() < 1 or df["period"].max() > N_PERIODS:
        raise ValueError("NDVI period outside 1..23")
    wide = df.pivot_table(index=["district_id", "year", "pixel_id", "is_agriculture"], columns="period",
                          values="ndvi", aggfunc="first")
    wide = wide.reindex(columns=range(1, N_PERIODS + 1))
    vals = wide.to_numpy(dtype=float)
    finite = vals[np.isfinite(vals)]
    if np.any((finite < -1) | (finite > 1)):
        raise ValueError("NDVI values outside [-1, 1]")
    idx = wide.index.to_frame(index=False)
    idx["vote"] = pixel_peak_windows(vals, idx["is_agriculture"].astype(bool).to_numpy(), threshold)
    rows, excluded = [], []
    for (d, y), g in idx.groupby(["district_id", "year"], sort=True):
        pk = district_peak_date(g["vote"].to_numpy(), str(d), int(y))
        if pk is None:
            excluded.append({"district_id": str(d), "year": int(y), "reason": "no_qualifying_pixels"})
        else:
            rows.append(peak_record(pk))
    return (pd.DataFrame(rows, columns=PEAK_COLUMNS),
            pd.DataFrame(excluded, columns=["district_id", "year", "reason"]))


def peak_record(pk: PeakDate) -> dict:
    return {"district_id": pk.district_id, "year": pk.year, "period": pk.period_index,
            "t0": pk.t0, "majority_share": pk.majority_share, "qualifying_pixels": pk.qualifying_pixels}


def peaks_to_list(df: pd.DataFrame) -> list[PeakDate]:
    return [PeakDate(str(r.district_id), int(r.year), int(r.period), pd.Timestamp(r.t0).date(),
                     float(r.majority_share), int(getattr(r, "qualifying_pixels", 0)))
            for r in df.itertuples(index=False)]


def perturb_peak(peak: PeakDate, delta_days: int) -> PeakDate:
    """Shift t0 by ``delta_days``, clamping (and flagging) at the calendar year edges."""
    t = peak.t0 + dt.timedelta(days=int(delta_days))
    lo, hi = dt.date(peak.year, 1, 1), dt.date(peak.year, 12, 31)
    clamped = not lo <= t <= hi
    t = min(max(t, lo), hi)
    return replace(peak, t0=t, period_index=period_of(t), clamped=clamped or peak.clamped)


def placebo_peak(seed, district_id: str, year: int, majority_share: float = 1.0) -> PeakDate:
    """Uniformly drawn spring period, reproducible per (seed, district, year)."""
    seed_words = list(np.atleast_1d(seed).astype(np.int64).tolist())
    rng = np.random.default_rng(seed_words + [zlib.crc32(district_id.encode()), int(year)])
    p = int(rng.integers(1, SPRING_PERIODS + 1))
    return PeakDate(district_id, int(year), p, period_start(int(year), p), majority_share)


def read_ndvi_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"pixel_id": str, "district_id": str})
    df["is_agriculture"] = df["is_agriculture"].astype(str).str.lower().isin(["1", "true", "t", "yes"])
    return df


def read_peaks_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"district_id": str}, comment="#")
    df["t0"] = pd.to_datetime(df["t0"]).dt.date
    return df
