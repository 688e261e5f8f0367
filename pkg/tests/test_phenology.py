from __future__ import annotations

import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harvestmig.phenology import (NdviSeries, PeakDate, district_peak_date, peaks_from_frame, period_of, period_start,
                                  perturb_peak, pixel_peak_window, placebo_peak)


def _series(values, agri=True):
    v = np.full(23, 0.1)
    v[:len(values)] = values
    return NdviSeries("p", "D01", agri, 2015, v)


def test_pixel_peak_examples():
    v = np.full(23, 0.2)
    v[6] = 0.7
    assert pixel_peak_window(_series(v)) == 7
    v = np.full(23, 0.1)
    v[3] = 0.25
    assert pixel_peak_window(_series(v)) is None
    v = np.full(23, 0.2)
    v[4] = v[8] = 0.6
    assert pixel_peak_window(_series(v)) == 5
    v = np.full(23, 0.2)
    v[6] = 0.7
    assert pixel_peak_window(_series(v, agri=False)) is None


def test_threshold_is_strict():
    v = np.full(23, 0.1)
    v[2] = 0.3
    assert pixel_peak_window(_series(v)) is None
    v[2] = 0.3000001
    assert pixel_peak_window(_series(v)) == 3


def test_only_spring_periods_vote():
    v = np.full(23, 0.2)
    v[4] = 0.5
    v[15] = 0.9          # autumn maximum ignored
    assert pixel_peak_window(_series(v)) == 5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.1, 0.35, 0.5, 0.6]), min_size=12, max_size=12))
def test_tie_break_matches_brute_force(vals):
    v = np.array(vals + [0.0] * 11)
    got = pixel_peak_window(_series(v))
    best = max(vals)
    expected = None if best <= 0.3 else min(i + 1 for i, x in enumerate(vals) if x == best)
    assert got == expected


def test_district_peak_examples():
    pk = district_peak_date([7] * 60 + [8] * 40, "D01", 2015)
    assert pk.period_index == 7 and pk.majority_share == pytest.approx(0.6)
    assert district_peak_date([7] * 50 + [8] * 50).period_index == 7
    assert district_peak_date([]) is None
    assert district_peak_date([0, 0]) is None
    assert pk.t0.timetuple().tm_yday == 97 == 1 + 16 * 6


def test_period_grid():
    for p in range(1, 24):
        d = period_start(2016, p)
        assert period_of(d) == p
        assert (d - dt.date(2016, 1, 1)).days == 16 * (p - 1)
    assert period_of(dt.date(2015, 12, 31)) == 23
    with pytest.raises(ValueError):
        period_start(2015, 24)


def test_perturb_peak():
    pk = PeakDate("D01", 2015, 7, dt.date(2015, 4, 7), 0.6)
    assert perturb_peak(pk, 14).t0 == dt.date(2015, 4, 21)
    early = PeakDate("D01", 2015, 1, dt.date(2015, 1, 5), 0.6)
    moved = perturb_peak(early, -14)
    assert moved.t0 == dt.date(2015, 1, 1) and moved.clamped
    assert perturb_peak(pk, 0) == pk


def test_placebo_peak_distribution():
    assert placebo_peak((3, 1), "D01", 2015) == placebo_peak((3, 1), "D01", 2015)
    draws = [placebo_peak((11, i), "D01", 2015).period_index for i in range(12_000)]
    counts = np.bincount(draws, minlength=13)[1:]
    assert max(draws) <= 12 and min(draws) >= 1
    sigma = np.sqrt(12_000 * (1 / 12) * (11 / 12))
    assert np.all(np.abs(counts - 1000) < 3 * sigma)


def _ndvi_frame(peaks: dict, n_pix=10):
    rows = []
    for (d, y), p in peaks.items():
        for k in range(n_pix):
            for period in range(1, 24):
                rows.append({"pixel_id": f"{d}-{k}", "district_id": d, "is_agriculture": k < n_pix - 1,
                             "year": y, "period": period, "ndvi": 0.7 if period == p else 0.2})
    return pd.DataFrame(rows)


def test_peaks_from_frame():
    df = _ndvi_frame({("D01", 2015): 6, ("D02", 2015): 9})
    flat = df[df.district_id == "D02"].assign(ndvi=0.2, district_id="D03")
    peaks, excluded = peaks_from_frame(pd.concat([df, flat]))
    assert peaks[["district_id", "period"]].values.tolist() == [["D01", 6], ["D02", 9]]
    assert peaks["qualifying_pixels"].tolist() == [9, 9]
    assert excluded.values.tolist() == [["D03", 2015, "no_qualifying_pixels"]]


def test_ndvi_range_checked():
    df = _ndvi_frame({("D01", 2015): 6}, 2)
    df.loc[0, "ndvi"] = 1.5
    with pytest.raises(ValueError):
        peaks_from_frame(df)
