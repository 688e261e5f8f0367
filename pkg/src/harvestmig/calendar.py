"""Day arithmetic shared by every stage.

All day boundaries are UTC midnight. Internally days are integer offsets
from a study start date so that per-day arrays can be indexed directly.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

EPOCH = dt.date(1970, 1, 1)
SECONDS_PER_DAY = 86400


def epoch_day(d: dt.date) -> int:
    return (d - EPOCH).days


def from_epoch_day(n: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(n))


def parse_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


@dataclass(frozen=True)
class StudyCalendar:
    """Inclusive range of study days, indexed 0..n_days-1."""

    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"study end {self.end} precedes start {self.start}")

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days + 1

    @property
    def start_epoch_day(self) -> int:
        return epoch_day(self.start)

    def index(self, d: dt.date) -> int:
        """Day index of ``d`` (may fall outside 0..n_days-1)."""
        return (d - self.start).days

    def date(self, i: int) -> dt.date:
        return self.start + dt.timedelta(days=int(i))

    def ts_bounds(self) -> tuple[int, int]:
        """Half-open epoch-second bounds [lo, hi) of the study range."""
        lo = self.start_epoch_day * SECONDS_PER_DAY
        return lo, lo + self.n_days * SECONDS_PER_DAY

    def day_index_of_ts(self, ts: np.ndarray) -> np.ndarray:
        return ts // SECONDS_PER_DAY - self.start_epoch_day

    def dates(self) -> list[dt.date]:
        return [self.date(i) for i in range(self.n_days)]


def iso_week_days(label: str) -> tuple[dt.date, dt.date]:
    """First and last calendar day of an ISO week label such as ``2015-W14``."""
    try:
        year_s, week_s = label.strip().upper().split("-W")
        monday = dt.date.fromisocalendar(int(year_s), int(week_s), 1)
    except ValueError as exc:
        raise ValueError(f"bad ISO week label {label!r}") from exc
    return monday, monday + dt.timedelta(days=6)


def iso_week_label(d: dt.date) -> str:
    y, w, _ = d.isocalendar()
    return f"{y}-W{w:02d}"
