from __future__ import annotations

import datetime as dt
import math

import numpy as np
import pyarrow as pa
from hypothesis import given, settings
from hypothesis import strategies as st

from harvestmig.calendar import StudyCalendar
from harvestmig.residence import (NO_RESIDENCE, DailyLocation, DailyTable, ResidenceSegment, daily_modal_district,
                                  daily_modal_table, infer_segments, process_shard, read_segments_csv,
                                  residence_matrix, residence_on_day, segment_table, write_segments_csv)

D0 = dt.date(2015, 3, 1)


def _ts(hour: int, day: dt.date = D0) -> dt.datetime:
    return dt.datetime(day.year, day.month, day.day, hour, tzinfo=dt.timezone.utc)


def _daily(spec):
    """[(offset_day, district)] -> DailyLocation list."""
    return [DailyLocation("s1", D0 + dt.timedelta(days=o), d, 1) for o, d in spec]


def test_modal_district_majority_and_empty():
    ev = [(_ts(h), "D01") for h in range(5)] + [(_ts(10 + h), "D02") for h in range(2)]
    assert daily_modal_district(ev).district_id == "D01"
    assert daily_modal_district([]) is None
    assert daily_modal_district([(_ts(1), None)]) is None


def test_modal_district_tie_goes_to_first_seen():
    ev = [(_ts(9), "D02"), (_ts(8), "D01"), (_ts(12), "D02"), (_ts(13), "D01"), (_ts(14), "D02"), (_ts(15), "D01")]
    assert daily_modal_district(ev).district_id == "D01"
    ev2 = [(_ts(8), "D02"), (_ts(9), "D01"), (_ts(10), "D01"), (_ts(11), "D02")]
    assert daily_modal_district(ev2).district_id == "D02"


def test_segments_examples():
    segs = infer_segments(_daily([(i, "D01") for i in range(30)]))
    assert [(s.district_id, s.n_days) for s in segs] == [("D01", 30)]
    segs = infer_segments(_daily([(i, "D01") for i in range(4)] + [(4 + i, "D02") for i in range(30)]))
    assert [(s.district_id, s.n_days) for s in segs] == [("D02", 30)]
    segs = infer_segments(_daily([(i, "D01") for i in range(10)] + [(12 + i, "D01") for i in range(10)]), 7, 3)
    assert [(s.district_id, s.start_day, s.n_days) for s in segs] == [("D01", D0, 22)]


def test_gap_longer_than_limit_splits():
    segs = infer_segments(_daily([(i, "D01") for i in range(10)] + [(14 + i, "D01") for i in range(10)]), 7, 3)
    # both halves qualify on their own; same-district neighbours merge
    assert [(s.start_day, s.end_day) for s in segs] == [(D0, D0 + dt.timedelta(days=23))]
    segs = infer_segments(_daily([(i, "D01") for i in range(5)] + [(9 + i, "D01") for i in range(5)]), 7, 3)
    assert segs == []


def test_residence_on_day_bounds():
    segs = [ResidenceSegment("s", "D01", D0, D0 + dt.timedelta(days=9)),
            ResidenceSegment("s", "D02", D0 + dt.timedelta(days=20), D0 + dt.timedelta(days=40))]
    assert residence_on_day(segs, D0 + dt.timedelta(days=3)) == "D01"
    assert residence_on_day(segs, D0 + dt.timedelta(days=15)) is None
    assert residence_on_day(segs, D0 + dt.timedelta(days=9)) == "D01"
    assert residence_on_day(segs, D0 + dt.timedelta(days=40)) == "D02"


def _oracle_segments(days, dists, min_days, max_gap):
    """Plain-Python restatement of the greedy scan."""
    min_obs = math.ceil(min_days / 2)
    out = []
    p = 0
    n = len(days)
    while p < n:
        q, last = p + 1, days[p]
        while q < n and dists[q] == dists[p] and days[q] - last - 1 <= max_gap:
            last = days[q]
            q += 1
        if last - days[p] + 1 >= min_days and q - p >= min_obs:
            if out and out[-1][0] == dists[p]:
                out[-1][2] = last
            else:
                out.append([dists[p], days[p], last])
            p = q
        else:
            p += 1
    return [tuple(x) for x in out]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.integers(0, 2)), min_size=1, max_size=40),
       st.integers(1, 10), st.integers(0, 4))
def test_segment_kernel_matches_oracle(runs, min_days, max_gap):
    # runs of (length, district) with random one-day holes
    rng = np.random.default_rng(len(runs) * 31 + min_days)
    days, dists, t = [], [], 0
    for length, d in runs:
        for _ in range(length):
            if rng.random() < 0.8:
                days.append(t)
                dists.append(d)
            t += 1
    if not days:
        return
    tab = DailyTable(np.zeros(len(days), np.int64), np.array(days, np.int32), np.array(dists, np.int16),
                     np.ones(len(days), np.int32))
    segs = segment_table(tab, min_days, max_gap)
    got = list(zip(segs.district.tolist(), segs.start.tolist(), segs.end.tolist()))
    assert got == _oracle_segments(days, dists, min_days, max_gap)
    # segments never overlap and are ordered
    assert all(a[2] < b[1] for a, b in zip(got, got[1:]))


def test_modal_table_matches_scalar():
    rng = np.random.default_rng(5)
    n = 3000
    sub = rng.integers(0, 20, n)
    day = rng.integers(0, 15, n)
    dist = rng.integers(0, 4, n).astype(np.int16)
    ts = (day * 86400 + rng.integers(0, 86400, n)).astype(np.int64)
    tab = daily_modal_table(sub, day, dist, ts, 15)
    for s, d, got in zip(tab.sub, tab.day, tab.district):
        m = (sub == s) & (day == d)
        ref = daily_modal_district(list(zip(ts[m].tolist(), [f"D{x}" for x in dist[m]])))
        assert ref.district_id == f"D{got}"


def test_residence_matrix_and_csv_roundtrip(tmp_path):
    cal = StudyCalendar(dt.date(2015, 1, 1), dt.date(2015, 3, 31))
    n = 40
    ts, subs, dist = [], [], []
    for s in range(3):
        for t in range(n):
            d = 0 if (s == 0 or t < 20) else 1
            ts.append((cal.start_epoch_day + t) * 86400 + 3600 * (s + 1))
            subs.append(f"sub{s}")
            dist.append(d)
    table = pa.table({"subscriber_id": pa.array(subs), "ts": pa.array(ts, pa.int64()),
                      "district": pa.array(dist, pa.int16())})
    sr = process_shard(table, cal)
    res = sr.matrix(cal.n_days)
    assert res.shape == (3, cal.n_days)
    assert (res[0, :40] == 0).all() and (res[0, 40:] == NO_RESIDENCE).all()
    assert (res[1, :20] == 0).all() and (res[1, 20:40] == 1).all()
    p = tmp_path / "seg.csv"
    write_segments_csv(p, sr, cal, ["D01", "D02"], "fingerprint=abc")
    assert p.read_text().startswith("# fingerprint=abc\n")
    back = read_segments_csv(p, cal, ["D01", "D02"])
    assert (back.matrix(cal.n_days) == res).all()
    assert list(back.subscriber_ids) == ["sub0", "sub1", "sub2"]


def test_residence_matrix_uncovered_is_undefined():
    from harvestmig.residence import SegmentTable
    segs = SegmentTable(np.array([0]), np.array([2], np.int16), np.array([3], np.int32), np.array([5], np.int32))
    res = residence_matrix(segs, 2, 8)
    assert res[0].tolist() == [-1, -1, -1, 2, 2, 2, -1, -1]
    assert (res[1] == NO_RESIDENCE).all()
