"""Daily modal districts and multi-day residence segments.

The per-subscriber logic lives in small numba kernels operating on
columnar arrays so whole shards are processed in one pass; the
single-subscriber helpers wrap the same kernels.
"""

from __future__ import annotations

import datetime as dt
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numba
import numpy as np
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from . import UNLOCATED
from .calendar import SECONDS_PER_DAY, StudyCalendar, from_epoch_day

DEFAULT_MIN_DAYS = 7
DEFAULT_MAX_GAP = 3
NO_RESIDENCE = -1


@dataclass(frozen=True)
class DailyLocation:
    subscriber_id: str
    day: dt.date
    district_id: str
    event_count: int


@dataclass(frozen=True)
class ResidenceSegment:
    subscriber_id: str
    district_id: str
    start_day: dt.date
    end_day: dt.date  # inclusive

    @property
    def n_days(self) -> int:
        return (self.end_day - self.start_day).days + 1


# ---------------------------------------------------------------------------
# kernels

@numba.njit(cache=True)
def _modal_kernel(key, district, ts):
    n = key.size
    out_key = np.empty(n, np.int64)
    out_d = np.empty(n, np.int16)
    out_c = np.empty(n, np.int32)
    m = 0
    i = 0
    while i < n:
        j = i + 1
        while j < n and key[j] == key[i]:
            j += 1
        best_d = -1
        best_c = 0
        best_t = 0
        for a in range(i, j):
            d = district[a]
            seen = False
            for b in range(i, a):
                if district[b] == d:
                    seen = True
                    break
            if seen:
                continue
            c = 0
            tmin = ts[a]
            for b in range(a, j):
                if district[b] == d:
                    c += 1
                    if ts[b] < tmin:
                        tmin = ts[b]
            if c > best_c or (c == best_c and (tmin < best_t or (tmin == best_t and d < best_d))):
                best_d = d
                best_c = c
                best_t = tmin
        out_key[m] = key[i]
        out_d[m] = best_d
        out_c[m] = j - i
        m += 1
        i = j
    return out_key[:m], out_d[:m], out_c[:m]


@numba.njit(cache=True)
def _segment_kernel(sub, day, dist, min_days, max_gap, min_obs):
    n = sub.size
    seg_sub = np.empty(n, np.int64)
    seg_d = np.empty(n, np.int16)
    seg_s = np.empty(n, np.int32)
    seg_e = np.empty(n, np.int32)
    m = 0
    i = 0
    while i < n:
        s = sub[i]
        stop = i
        while stop < n and sub[stop] == s:
            stop += 1
        first = m
        p = i
        while p < stop:
            d = dist[p]
            start = day[p]
            last = start
            nobs = 1
            q = p + 1
            while q < stop and dist[q] == d and day[q] - last - 1 <= max_gap:
                last = day[q]
                nobs += 1
                q += 1
            if last - start + 1 >= min_days and nobs >= min_obs:
                if m > first and seg_d[m - 1] == d:
                    seg_e[m - 1] = last
                else:
                    seg_sub[m] = s
                    seg_d[m] = d
                    seg_s[m] = start
                    seg_e[m] = last
                    m += 1
                p = q
            else:
                p += 1
        i = stop
    return seg_sub[:m], seg_d[:m], seg_s[:m], seg_e[:m]


@numba.njit(cache=True)
def _fill_residence(res, row, dist, start, end):
    n_days = res.shape[1]
    for k in range(row.size):
        a = max(start[k], 0)
        b = min(end[k], n_days - 1)
        for t in range(a, b + 1):
            res[row[k], t] = dist[k]


# ---------------------------------------------------------------------------
# columnar API

@dataclass
class DailyTable:
    """Daily modal districts for many subscribers (sorted by sub, day)."""

    sub: np.ndarray       # int64 subscriber code
    day: np.ndarray       # int32 day index
    district: np.ndarray  # int16
    count: np.ndarray     # int32 events that day


@dataclass
class SegmentTable:
    """Residence segments for many subscribers (sorted by sub, start)."""

    sub: np.ndarray
    district: np.ndarray
    start: np.ndarray     # int32 day index
    end: np.ndarray       # inclusive

    def __len__(self):
        return len(self.sub)


def daily_modal_table(sub: np.ndarray, day: np.ndarray, district: np.ndarray, ts: np.ndarray,
                      n_days: int) -> DailyTable:
    """Modal district per subscriber-day; ties go to the district seen first."""
    sub = np.asarray(sub, dtype=np.int64)
    day = np.asarray(day, dtype=np.int64)
    district = np.asarray(district, dtype=np.int16)
    ts = np.asarray(ts, dtype=np.int64)
    ok = (district != UNLOCATED) & (day >= 0) & (day < n_days)
    if not ok.all():
        sub, day, district, ts = sub[ok], day[ok], district[ok], ts[ok]
    key = sub * n_days + day
    if key.size and not np.all(key[1:] >= key[:-1]):
        order = np.argsort(key, kind="stable")
        key, district, ts = key[order], district[order], ts[order]
    k, d, c = _modal_kernel(key, district, ts)
    return DailyTable(k // n_days, (k % n_days).astype(np.int32), d, c)


def segment_table(daily: DailyTable, min_days: int = DEFAULT_MIN_DAYS,
                  max_gap: int = DEFAULT_MAX_GAP) -> SegmentTable:
    """Greedy minimum-length segmentation of every subscriber's daily record.

    A candidate opens at an observed day, extends over observed days in the
    same district with unobserved gaps of at most ``max_gap`` days, and is
    kept when it spans ``min_days`` days with at least ``ceil(min_days/2)``
    observed days. A rejected candidate is rescanned from its second
    observed day. Consecutive kept segments in one district are merged.
    """
    if min_days < 1 or max_gap < 0:
        raise ValueError("min_days must be >= 1 and max_gap >= 0")
    s, d, a, b = _segment_kernel(daily.sub, daily.day.astype(np.int32), daily.district,
                                 int(min_days), int(max_gap), int(math.ceil(min_days / 2)))
    return SegmentTable(s, d, a, b)


def residence_matrix(segs: SegmentTable, n_subs: int, n_days: int, row_of_sub=None) -> np.ndarray:
    """Dense (subscriber x day) district index, NO_RESIDENCE where uncovered."""
    res = np.full((n_subs, n_days), NO_RESIDENCE, dtype=np.int16)
    rows = segs.sub if row_of_sub is None else row_of_sub[segs.sub]
    _fill_residence(res, np.asarray(rows, dtype=np.int64), segs.district, segs.start, segs.end)
    return res


@dataclass
class ShardResidence:
    subscriber_ids: np.ndarray  # code -> id string
    daily: DailyTable
    segments: SegmentTable

    def matrix(self, n_days: int) -> np.ndarray:
        return residence_matrix(self.segments, len(self.subscriber_ids), n_days)


def process_shard(table: pa.Table, calendar: StudyCalendar, min_days: int = DEFAULT_MIN_DAYS,
                  max_gap: int = DEFAULT_MAX_GAP) -> ShardResidence:
    """Events of one shard (subscriber_id, ts, district) -> daily + segments."""
    enc = pc.dictionary_encode(table.column("subscriber_id")).combine_chunks()
    ids = np.asarray(enc.dictionary.to_numpy(zero_copy_only=False), dtype=object)
    # Re-code subscribers in sorted-id order so outputs are ordered by id.
    order = np.argsort(ids, kind="stable")
    recode = np.empty(len(ids), dtype=np.int64)
    recode[order] = np.arange(len(ids))
    sub = recode[enc.indices.to_numpy(zero_copy_only=False)]
    ts = table.column("ts").to_numpy()
    day = ts // SECONDS_PER_DAY - calendar.start_epoch_day
    district = table.column("district").to_numpy()
    daily = daily_modal_table(sub, day, district, ts, calendar.n_days)
    segs = segment_table(daily, min_days, max_gap)
    return ShardResidence(ids[order], daily, segs)


# ---------------------------------------------------------------------------
# single-subscriber helpers

def daily_modal_district(events: Iterable[tuple], district_ids: Sequence[str] | None = None,
                         subscriber_id: str = "", day: dt.date | None = None) -> DailyLocation | None:
    """Modal district of one subscriber-day.

    ``events`` are ``(timestamp, district)`` pairs; timestamps may be epoch
    seconds or datetimes and districts may be ids or None for unlocated.
    """
    rows = [(e[0], e[1]) for e in events if e[1] is not None and e[1] != UNLOCATED]
    if not rows:
        return None
    names = sorted({d for _, d in rows})
    code = {n: i for i, n in enumerate(names)}
    ts = np.array([_as_epoch(t) for t, _ in rows], dtype=np.int64)
    dist = np.array([code[d] for _, d in rows], dtype=np.int16)
    k, d, c = _modal_kernel(np.zeros(len(rows), np.int64), dist, ts)
    if day is None:
        day = from_epoch_day(int(ts.min() // SECONDS_PER_DAY))
    return DailyLocation(subscriber_id, day, names[int(d[0])], int(c[0]))


def _as_epoch(t) -> int:
    if isinstance(t, (int, np.integer)):
        return int(t)
    if isinstance(t, dt.datetime):
        if t.tzinfo is None:
            t = t.replace(tzinfo=dt.timezone.utc)
        return int(t.timestamp())
    return int(np.datetime64(t, "s").astype(np.int64))


def infer_segments(daily: Sequence[DailyLocation], min_days: int = DEFAULT_MIN_DAYS,
                   max_gap: int = DEFAULT_MAX_GAP) -> list[ResidenceSegment]:
    """Residence segments for one subscriber's daily locations (sorted by day)."""
    if not daily:
        return []
    sid = daily[0].subscriber_id
    names = sorted({x.district_id for x in daily})
    code = {n: i for i, n in enumerate(names)}
    base = min(x.day for x in daily)
    tab = DailyTable(
        np.zeros(len(daily), np.int64),
        np.array([(x.day - base).days for x in daily], np.int32),
        np.array([code[x.district_id] for x in daily], np.int16),
        np.array([x.event_count for x in daily], np.int32),
    )
    if np.any(np.diff(tab.day) <= 0):
        raise ValueError("daily locations must be strictly increasing by day")
    segs = segment_table(tab, min_days, max_gap)
    return [
        ResidenceSegment(sid, names[int(d)], base + dt.timedelta(days=int(a)), base + dt.timedelta(days=int(b)))
        for d, a, b in zip(segs.district, segs.start, segs.end)
    ]


def residence_on_day(segments: Sequence[ResidenceSegment], day: dt.date) -> str | None:
    for s in segments:
        if s.start_day <= day <= s.end_day:
            return s.district_id
    return None


# ---------------------------------------------------------------------------
# shard files

def write_daily_csv(path, shard: ShardResidence, calendar: StudyCalendar, district_ids: Sequence[str],
                    header_comment: str | None = None):
    d = shard.daily
    tbl = pa.table({
        "subscriber_id": pa.array(shard.subscriber_ids[d.sub], pa.string()),
        "day": _day_array(d.day, calendar),
        "district_id": pa.array(np.asarray(district_ids, dtype=object)[d.district], pa.string()),
        "event_count": pa.array(d.count),
    })
    _write_csv(path, tbl, header_comment)


def write_segments_csv(path, shard: ShardResidence, calendar: StudyCalendar, district_ids: Sequence[str],
                       header_comment: str | None = None):
    s = shard.segments
    tbl = pa.table({
        "subscriber_id": pa.array(shard.subscriber_ids[s.sub], pa.string()),
        "district_id": pa.array(np.asarray(district_ids, dtype=object)[s.district], pa.string()),
        "start_day": _day_array(s.start, calendar),
        "end_day": _day_array(s.end, calendar),
    })
    _write_csv(path, tbl, header_comment)


def read_segments_csv(path, calendar: StudyCalendar, district_ids: Sequence[str]) -> ShardResidence:
    """Inverse of :func:`write_segments_csv` (daily table left empty)."""
    tbl = pacsv.read_csv(
        path,
        read_options=pacsv.ReadOptions(skip_rows=_comment_lines(path)),
        convert_options=pacsv.ConvertOptions(column_types={
            "subscriber_id": pa.string(), "district_id": pa.string(),
            "start_day": pa.date32(), "end_day": pa.date32()}),
    )
    enc = pc.dictionary_encode(tbl.column("subscriber_id")).combine_chunks()
    ids = np.asarray(enc.dictionary.to_numpy(zero_copy_only=False), dtype=object)
    dindex = {d: i for i, d in enumerate(district_ids)}
    dist = np.array([dindex[x] for x in tbl.column("district_id").to_pylist()], dtype=np.int16)
    off = calendar.start_epoch_day
    start = tbl.column("start_day").cast(pa.int32()).to_numpy() - off
    end = tbl.column("end_day").cast(pa.int32()).to_numpy() - off
    segs = SegmentTable(enc.indices.to_numpy(zero_copy_only=False).astype(np.int64), dist,
                        start.astype(np.int32), end.astype(np.int32))
    empty = DailyTable(*(np.empty(0, t) for t in (np.int64, np.int32, np.int16, np.int32)))
    return ShardResidence(ids, empty, segs)


def _day_array(idx: np.ndarray, calendar: StudyCalendar) -> pa.Array:
    return pa.array(np.asarray(idx, dtype=np.int32) + calendar.start_epoch_day, pa.int32()).cast(pa.date32())


def _comment_lines(path) -> int:
    n = 0
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            n += 1
    return n


def _write_csv(path, tbl: pa.Table, header_comment: str | None):
    with open(path, "wb") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n".encode())
        pacsv.write_csv(tbl, fh, pacsv.WriteOptions(quoting_style="none"))


def shard_file(out_dir, kind: str, k: int) -> str:
    return os.path.join(out_dir, f"{kind}-{k:04d}.csv")
