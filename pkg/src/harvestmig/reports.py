"""Plot-ready tables: daily excess series, histograms, origin-destination
shifts, coefficient tables and migrant totals."""

from __future__ import annotations

import warnings
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .calendar import StudyCalendar
from .econometrics import SpecResult
from .metrics import od_window_counts
from .panel import Panel

SERIES_BEFORE, SERIES_AFTER = 120, 90
OD_SPAN = 156          # t0-120 .. t0+35
OD_BASE = (0, 90)      # offsets t0-120 .. t0-31
OD_HARVEST = (135, 156)  # offsets t0+15 .. t0+35
HIST_BIN = 0.0025


def excess_series(panel: Panel) -> pd.DataFrame:
    """Daily mean E_dt by cultivation group around t0 (needs keep_series=True)."""
    if panel.n and not panel.series:
        raise ValueError("panel was built without outcome series")
    cls = dict(zip(zip(panel.frame["district_id"], panel.frame["year"]), panel.frame["cultivation_class"]))
    rows = []
    by_group: dict[str, list[np.ndarray]] = {}
    for s in panel.series:
        by_group.setdefault(cls[(s.district_id, s.year)], []).append(s.excess)
    for g in ("none", "low", "high"):
        arrs = by_group.get(g, [])
        if not arrs:
            continue
        mat = np.vstack(arrs)
        ok = np.isfinite(mat)
        n = ok.sum(axis=0)
        with np.errstate(invalid="ignore"):
            mean = np.where(n > 0, np.nansum(mat, axis=0) / np.maximum(n, 1), np.nan)
        offs = panel.series[0].offsets
        rows.append(pd.DataFrame({"group": g, "offset": offs, "mean_excess": mean, "n_obs": n,
                                  "n_rows": len(arrs)}))
    return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(
        columns=["group", "offset", "mean_excess", "n_obs", "n_rows"])


def baseline_harvest_histogram(panel: Panel, width: float = HIST_BIN) -> pd.DataFrame:
    """Counts of M_base and M_base + E_dy on shared bins."""
    f = panel.frame
    base = f["m_base"].to_numpy(float)
    harvest = base + f["outcome"].to_numpy(float)
    if len(base) == 0:
        return pd.DataFrame(columns=["bin_lo", "bin_hi", "baseline", "harvest"])
    lo = np.floor(min(base.min(), harvest.min()) / width) * width
    hi = np.ceil(max(base.max(), harvest.max()) / width) * width + width
    edges = np.round(np.arange(lo, hi + width / 2, width), 10)
    b, _ = np.histogram(base, edges)
    h, _ = np.histogram(harvest, edges)
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "baseline": b, "harvest": h})


def od_counts(residences: Iterable[np.ndarray], peaks: pd.DataFrame, district_ids: Sequence[str],
              calendar: StudyCalendar, lag: int = 30) -> dict[int, np.ndarray]:
    """(destination, source, offset) mover counts per year, windows starting at t0-120."""
    dindex = {d: i for i, d in enumerate(district_ids)}
    years = sorted(peaks["year"].unique())
    nd = len(district_ids)
    starts = {}
    for y in years:
        ws = np.full(nd, calendar.n_days + OD_SPAN, dtype=np.int64)
        for r in peaks[peaks["year"] == y].itertuples(index=False):
            if str(r.district_id) in dindex:
                ws[dindex[str(r.district_id)]] = calendar.index(r.t0) - SERIES_BEFORE
        starts[int(y)] = ws
    out = {y: np.zeros((nd, nd, OD_SPAN), dtype=np.int64) for y in starts}
    for res in residences:
        for y, ws in starts.items():
            od_window_counts(res, lag, ws, OD_SPAN, out[y])
    return out


def od_matrix(counts: dict[int, np.ndarray], district_ids: Sequence[str]) -> pd.DataFrame:
    """Harvest-window minus baseline mean share of in-migrants by source, averaged over years."""
    nd = len(district_ids)
    diffs, bases, harvs = [], [], []
    for y in sorted(counts):
        c = counts[y].astype(float)
        tot = c.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(tot > 0, c / np.maximum(tot, 1), np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            b = np.nanmean(share[:, :, OD_BASE[0]:OD_BASE[1]], axis=2)
            h = np.nanmean(share[:, :, OD_HARVEST[0]:OD_HARVEST[1]], axis=2)
        bases.append(b)
        harvs.append(h)
        diffs.append(h - b)
    # All-NaN cells (no movers between a pair) are expected and stay NaN.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        base = np.nanmean(np.stack(bases), axis=0) if bases else np.full((nd, nd), np.nan)
        harv = np.nanmean(np.stack(harvs), axis=0) if harvs else np.full((nd, nd), np.nan)
        diff = np.nanmean(np.stack(diffs), axis=0) if diffs else np.full((nd, nd), np.nan)
    dst, src = np.meshgrid(np.arange(nd), np.arange(nd), indexing="ij")
    ids = np.asarray(district_ids, dtype=object)
    return pd.DataFrame({"destination": ids[dst.ravel()], "source": ids[src.ravel()],
                         "baseline_share": base.ravel(), "harvest_share": harv.ravel(), "difference": diff.ravel()})


def coefficient_table(results: dict[str, SpecResult]) -> pd.DataFrame:
    frames = []
    for name, res in results.items():
        f = res.contrast_frame()
        f.insert(0, "model", name)
        f["n"] = res.fit.n
        frames.append(f)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def estimate_totals(coefficient: float, high_rows: pd.DataFrame, population: pd.DataFrame):
    """Seasonal migrants per high-cultivation district-year = coefficient x population.

    Returns (per district-year, per year, skipped district-years).
    """
    pop = population.assign(district_id=population["district_id"].astype(str))
    keys = ["district_id", "year"] if "year" in pop.columns else ["district_id"]
    rows = high_rows[["district_id", "year"]].assign(district_id=lambda f: f["district_id"].astype(str))
    merged = rows.merge(pop[keys + ["population"]], on=keys, how="left")
    skipped = merged[merged["population"].isna()][["district_id", "year"]].reset_index(drop=True)
    ok = merged[merged["population"].notna()].copy()
    ok["coefficient"] = float(coefficient)
    ok["migrants"] = ok["population"].astype(float) * float(coefficient)
    per_year = ok.groupby("year", as_index=False).agg(migrants=("migrants", "sum"),
                                                      districts=("district_id", "count"))
    return ok.reset_index(drop=True), per_year, skipped
