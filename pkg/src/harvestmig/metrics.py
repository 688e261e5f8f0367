"""District-day migration rates, in-migrant composition and retention.

Presence is segment based: a subscriber is in district d on day t when a
residence segment covering t names d. In-migrants to d on t were resident
elsewhere ``lag`` days earlier; subscribers with no residence on the
reference day are never movers but stay in the denominator.
"""

from __future__ import annotations

import datetime as dt
import io
import zipfile
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
import pandas as pd

from .calendar import StudyCalendar
from .residence import NO_RESIDENCE

CULTIVATION_LEVELS = ("none", "low", "high")
N_CELLS = 12          # cultivation x violence_30d x taliban
UNKNOWN_CLASS = 12    # source district without class data
N_CLASS_SLOTS = 13

DEFAULT_LAG = 30
RETURN_HORIZON = 90
STAY_HORIZON = 30
DEFAULT_MIN_PRESENT = 20

# valid_flags bits
IN_VALID = 1
OUT_VALID = 2
COMP_DEFINED = 4
RET30_DEFINED = 8
RET90_DEFINED = 16
LOW_SUPPORT = 32


@dataclass(frozen=True)
class SourceClass:
    cultivation: str
    violence_30d: bool
    taliban: bool

    @property
    def code(self) -> int:
        return encode_class(CULTIVATION_LEVELS.index(self.cultivation), self.violence_30d, self.taliban)

    @classmethod
    def from_code(cls, code: int) -> "SourceClass":
        return cls(CULTIVATION_LEVELS[code // 4], bool(code // 2 % 2), bool(code % 2))


def encode_class(cult: int, violence: bool, taliban: bool) -> int:
    return int(cult) * 4 + int(bool(violence)) * 2 + int(bool(taliban))


@dataclass
class DistrictDayMetrics:
    district_id: str
    day: dt.date
    present_count: int
    in_rate: float | None
    out_rate: float | None
    composition: dict[str, float] | None
    still_same_30: float | None
    returned_prev_30: float | None
    returned_prev_90: float | None
    valid_flags: int


# ---------------------------------------------------------------------------
# kernels

@numba.njit(cache=True)
def _accumulate(res, lag, class_of, present, movers, out_num, out_den, comp,
                still30, ret30, ret90, den30, den90):
    n_sub, n_days = res.shape
    for s in range(n_sub):
        for t in range(n_days):
            d = res[s, t]
            if d >= 0:
                present[d, t] += 1
            if t < lag:
                continue
            o = res[s, t - lag]
            if o < 0:
                continue
            out_den[o, t] += 1
            if d >= 0 and d != o:
                out_num[o, t] += 1
            if d < 0 or d == o:
                continue
            movers[d, t] += 1
            comp[d, t, class_of[o, t]] += 1
            if t + STAY_HORIZON < n_days:
                den30[d, t] += 1
                r = res[s, t + STAY_HORIZON]
                if r == d:
                    still30[d, t] += 1
                if r == o:
                    ret30[d, t] += 1
            if t + RETURN_HORIZON < n_days:
                den90[d, t] += 1
                for u in range(t + 1, t + RETURN_HORIZON + 1):
                    if res[s, u] == o:
                        ret90[d, t] += 1
                        break


@numba.njit(cache=True)
def _accumulate_od(res, lag, win_start, span, od):
    n_sub, n_days = res.shape
    for s in range(n_sub):
        for t in range(lag, n_days):
            d = res[s, t]
            if d < 0:
                continue
            k = t - win_start[d]
            if k < 0 or k >= span:
                continue
            o = res[s, t - lag]
            if o >= 0 and o != d:
                od[d, o, k] += 1


# ---------------------------------------------------------------------------

def source_class_map(district_ids: Sequence[str], calendar: StudyCalendar,
                     cultivation: pd.DataFrame | None, violence_days: np.ndarray | None,
                     taliban: dict[str, bool] | None) -> np.ndarray:
    """Class code of every (source district, day), UNKNOWN_CLASS without data.

    ``cultivation`` has columns district_id, year, cultivation_class;
    ``violence_days`` is a boolean (district x day) array flagging a fatal
    event in the 30 days before each day.
    """
    nd, nt = len(district_ids), calendar.n_days
    out = np.full((nd, nt), UNKNOWN_CLASS, dtype=np.int8)
    if cultivation is None or taliban is None:
        return out
    years = np.array([calendar.date(t).year for t in range(nt)])
    dindex = {d: i for i, d in enumerate(district_ids)}
    viol = violence_days if violence_days is not None else np.zeros((nd, nt), dtype=bool)
    for row in cultivation.itertuples(index=False):
        i = dindex.get(str(row.district_id))
        if i is None or str(row.district_id) not in taliban:
            continue
        cols = years == int(row.year)
        if not cols.any():
            continue
        c = CULTIVATION_LEVELS.index(row.cultivation_class)
        out[i, cols] = c * 4 + viol[i, cols].astype(np.int8) * 2 + int(bool(taliban[str(row.district_id)]))
    return out


@dataclass
class MetricsTable:
    """Per district-day counts; rates and shares are derived on demand."""

    district_ids: list[str]
    calendar: StudyCalendar
    lag: int
    present: np.ndarray
    movers: np.ndarray
    out_num: np.ndarray
    out_den: np.ndarray
    comp: np.ndarray          # (district, day, N_CLASS_SLOTS)
    still30: np.ndarray
    ret30: np.ndarray
    ret90: np.ndarray
    den30: np.ndarray
    den90: np.ndarray
    min_present: int = DEFAULT_MIN_PRESENT
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def empty(cls, district_ids, calendar: StudyCalendar, lag: int = DEFAULT_LAG,
              min_present: int = DEFAULT_MIN_PRESENT) -> "MetricsTable":
        shape = (len(district_ids), calendar.n_days)
        z = lambda: np.zeros(shape, dtype=np.int64)  # noqa: E731
        return cls(list(district_ids), calendar, int(lag), z(), z(), z(), z(),
                   np.zeros(shape + (N_CLASS_SLOTS,), dtype=np.int64), z(), z(), z(), z(), z(),
                   min_present=min_present)

    def add_residence(self, res: np.ndarray, class_of: np.ndarray):
        """Accumulate one shard's (subscriber x day) residence matrix."""
        if res.shape[1] != self.calendar.n_days:
            raise ValueError("residence matrix does not match the study calendar")
        _accumulate(res, self.lag, class_of, self.present, self.movers, self.out_num, self.out_den,
                    self.comp, self.still30, self.ret30, self.ret90, self.den30, self.den90)
        self._cache.clear()

    # -- rates --------------------------------------------------------------
    def _ratio(self, num, den):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, num / np.maximum(den, 1), np.nan)

    def in_rate(self) -> tuple[np.ndarray, np.ndarray]:
        """(rate, valid); exact 0 and 1 are discarded as invalid."""
        r = self._ratio(self.movers, self.present)
        return r, np.isfinite(r) & (r > 0) & (r < 1)

    def out_rate(self) -> tuple[np.ndarray, np.ndarray]:
        r = self._ratio(self.out_num, self.out_den)
        return r, np.isfinite(r) & (r > 0) & (r < 1)

    def share(self, cultivation: str | None = None, violence: bool | None = None,
              taliban: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Share of in-migrants whose source falls in the selected classes."""
        codes = [
            encode_class(c, v, t)
            for c in range(3) for v in (0, 1) for t in (0, 1)
            if (cultivation is None or CULTIVATION_LEVELS[c] == cultivation)
            and (violence is None or bool(v) == violence)
            and (taliban is None or bool(t) == taliban)
        ]
        num = self.comp[:, :, codes].sum(axis=2)
        r = self._ratio(num, self.movers)
        return r, np.isfinite(r)

    def retention(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        num, den = {"still30": (self.still30, self.den30), "ret30": (self.ret30, self.den30),
                    "ret90": (self.ret90, self.den90)}[which]
        r = self._ratio(num, den)
        return r, np.isfinite(r)

    def outcome(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Daily series (value, valid) for a named outcome.

        Names: ``in_rate``, ``out_rate``, ``still30``, ``ret30``, ``ret90``,
        or ``comp_<none|low|high|any>[_v0|_v1][_t0|_t1]``.
        """
        if name in self._cache:
            return self._cache[name]
        if name == "in_rate":
            out = self.in_rate()
        elif name == "out_rate":
            out = self.out_rate()
        elif name in ("still30", "ret30", "ret90"):
            out = self.retention(name)
        elif name.startswith("comp_"):
            out = self.share(**parse_share_name(name))
        else:
            raise KeyError(f"unknown outcome {name!r}")
        self._cache[name] = out
        return out

    def valid_flags(self) -> np.ndarray:
        flags = np.zeros(self.present.shape, dtype=np.int64)
        flags |= self.in_rate()[1] * IN_VALID
        flags |= self.out_rate()[1] * OUT_VALID
        flags |= (self.movers > 0) * COMP_DEFINED
        flags |= (self.den30 > 0) * RET30_DEFINED
        flags |= (self.den90 > 0) * RET90_DEFINED
        flags |= (self.present < self.min_present) * LOW_SUPPORT
        return flags

    def row(self, district_id: str, day: dt.date) -> DistrictDayMetrics:
        d = self.district_ids.index(district_id)
        t = self.calendar.index(day)

        def pick(pair):
            v, ok = pair
            return float(v[d, t]) if ok[d, t] else None

        comp = None
        if self.movers[d, t] > 0:
            comp = {c: float(self.share(cultivation=c)[0][d, t]) for c in CULTIVATION_LEVELS}
        return DistrictDayMetrics(
            district_id, day, int(self.present[d, t]),
            pick(self.in_rate()), pick(self.out_rate()), comp,
            pick(self.retention("still30")), pick(self.retention("ret30")), pick(self.retention("ret90")),
            int(self.valid_flags()[d, t]),
        )

    def share_columns(self) -> dict[str, str]:
        cols = {f"share_{c}": f"comp_{c}" for c in CULTIVATION_LEVELS}
        cols["share_violence"] = "comp_any_v1"
        cols["share_taliban"] = "comp_any_t1"
        for c in CULTIVATION_LEVELS:
            for v in (0, 1):
                for t in (0, 1):
                    cols[f"share_{c}_v{v}_t{t}"] = f"comp_{c}_v{v}_t{t}"
        return cols

    def to_frame(self) -> pd.DataFrame:
        nd, nt = self.present.shape
        days = pd.to_datetime([self.calendar.date(t) for t in range(nt)]).date
        out = {
            "district_id": np.repeat(self.district_ids, nt),
            "day": np.tile(days, nd),
            "present": self.present.ravel(),
            "in_rate": self.in_rate()[0].ravel(),
            "out_rate": self.out_rate()[0].ravel(),
        }
        for col, name in self.share_columns().items():
            out[col] = self.outcome(name)[0].ravel()
        out["still30"] = self.retention("still30")[0].ravel()
        out["ret30"] = self.retention("ret30")[0].ravel()
        out["ret90"] = self.retention("ret90")[0].ravel()
        out["valid_flags"] = self.valid_flags().ravel()
        out["movers"] = self.movers.ravel()
        out["out_num"] = self.out_num.ravel()
        out["out_den"] = self.out_den.ravel()
        return pd.DataFrame(out)

    # -- persistence ----------------------------------------------------------
    def save(self, path, **extra):
        """npz archive with fixed member timestamps so equal tables give equal bytes."""
        arrays = {"district_ids": np.array(self.district_ids), "start": np.array(str(self.calendar.start)),
                  "end": np.array(str(self.calendar.end)), "lag": np.array(self.lag),
                  "min_present": np.array(self.min_present), **{k: getattr(self, k) for k in _COUNT_FIELDS},
                  **{k: np.array(v) for k, v in extra.items()}}
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.array(arr, order="C"), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue(),
                            compress_type=zipfile.ZIP_DEFLATED)

    @classmethod
    def load(cls, path) -> "MetricsTable":
        z = np.load(path, allow_pickle=False)
        cal = StudyCalendar(dt.date.fromisoformat(str(z["start"])), dt.date.fromisoformat(str(z["end"])))
        return cls([str(x) for x in z["district_ids"]], cal, int(z["lag"]),
                   *(z[k] for k in _COUNT_FIELDS), min_present=int(z["min_present"]))


_COUNT_FIELDS = ("present", "movers", "out_num", "out_den", "comp", "still30", "ret30", "ret90", "den30", "den90")


def parse_share_name(name: str) -> dict:
    parts = name.split("_")[1:]
    if not parts or parts[0] not in CULTIVATION_LEVELS + ("any",):
        raise KeyError(f"bad composition outcome {name!r}")
    sel = {"cultivation": None if parts[0] == "any" else parts[0]}
    for p in parts[1:]:
        if p in ("v0", "v1"):
            sel["violence"] = p == "v1"
        elif p in ("t0", "t1"):
            sel["taliban"] = p == "t1"
        else:
            raise KeyError(f"bad composition outcome {name!r}")
    return sel


def od_window_counts(res: np.ndarray, lag: int, win_start: np.ndarray, span: int, od: np.ndarray):
    """Accumulate movers per (destination, source, day offset) inside windows.

    ``win_start[d]`` is the first day index of destination d's window;
    destinations without a window should carry a start beyond the calendar.
    """
    _accumulate_od(res, lag, np.asarray(win_start, dtype=np.int64), int(span), od)


# ---------------------------------------------------------------------------
# single district-day definitions (direct, unoptimised)

def in_rate(res: np.ndarray, d: int, t: int, lag: int = DEFAULT_LAG):
    """(rate or None, mover row indices) for destination ``d`` on day ``t``."""
    here = res[:, t] == d
    n = int(here.sum())
    if t - lag < 0:
        raise ValueError("reference day precedes the residence data")
    ref = res[:, t - lag]
    movers = np.flatnonzero(here & (ref != NO_RESIDENCE) & (ref != d))
    if n == 0:
        return None, movers
    return len(movers) / n, movers


def out_rate(res: np.ndarray, d: int, t: int, lag: int = DEFAULT_LAG) -> float | None:
    was = res[:, t - lag] == d
    n = int(was.sum())
    if n == 0:
        return None
    now = res[:, t]
    left = was & (now != NO_RESIDENCE) & (now != d)
    return int(left.sum()) / n


def is_discarded(rate: float | None) -> bool:
    """Rates of exactly 0 or 1 are treated as data sparsity, not migration."""
    return rate is None or rate == 0.0 or rate == 1.0


def composition_share(res: np.ndarray, d: int, t: int, class_of_source, lag: int = DEFAULT_LAG) -> float | None:
    """Share of movers into (d, t) whose reference-day district satisfies ``class_of_source``."""
    _, movers = in_rate(res, d, t, lag)
    if len(movers) == 0:
        return None
    src = res[movers, t - lag]
    return float(np.mean([bool(class_of_source(int(o))) for o in src]))


def retention_shares(res: np.ndarray, d: int, t: int, lag: int = DEFAULT_LAG):
    """(still_same_30, returned_prev_30, returned_prev_90) among movers into (d, t)."""
    _, movers = in_rate(res, d, t, lag)
    if len(movers) == 0 or t + RETURN_HORIZON >= res.shape[1]:
        return None, None, None
    prev = res[movers, t - lag]
    later = res[movers, t + STAY_HORIZON]
    still = float(np.mean(later == d))
    back30 = float(np.mean(later == prev))
    window = res[movers, t + 1:t + RETURN_HORIZON + 1]
    back90 = float(np.mean((window == prev[:, None]).any(axis=1)))
    return still, back30, back90


def seasonal_return_share(r_base: float, r_harvest: float, n_base: float, n_harvest: float) -> float | None:
    """Return share among seasonal migrants only.

    Regular in-migrants keep their baseline return rate, so the extra
    returners above ``r_base * n_base`` are credited to the
    ``n_harvest - n_base`` seasonal arrivals.
    """
    if not (0 <= r_base <= 1 and 0 <= r_harvest <= 1):
        raise ValueError("return rates must lie in [0, 1]")
    if n_harvest <= n_base or n_base < 0:
        return None
    return (r_harvest * n_harvest - r_base * n_base) / (n_harvest - n_base)
