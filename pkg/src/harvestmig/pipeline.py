"""Stage helpers shared by the command line and the tests."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .calendar import StudyCalendar
from .ingest import (RejectionReport, TowerRegistry, build_registry, parse_event_stream, read_shard,
                     shard_events)
from .metrics import MetricsTable, source_class_map
from .panel import PanelBuilder, classify_cultivation
from .residence import (DEFAULT_MAX_GAP, DEFAULT_MIN_DAYS, DailyTable, ShardResidence, process_shard,
                        residence_matrix, segment_table)
from .spatial import RoadViolenceIndex, violence_day_matrix


def classified(cultivation: pd.DataFrame, high_threshold: float = 1000.0) -> pd.DataFrame:
    cult = cultivation.copy()
    cult["district_id"] = cult["district_id"].astype(str)
    cult["cultivation_class"] = [classify_cultivation(float(x), high_threshold) for x in cult["poppy_ha"]]
    return cult


def class_map(district_ids: Sequence[str], calendar: StudyCalendar, cultivation: pd.DataFrame,
              events: pd.DataFrame | None, taliban: Mapping[str, bool], high_threshold: float = 1000.0) -> np.ndarray:
    """Source-class code per (district, day) for in-migrant composition."""
    vdays = violence_day_matrix(events, district_ids, calendar) if events is not None and len(events) else None
    return source_class_map(district_ids, calendar, classified(cultivation, high_threshold), vdays, dict(taliban))


def _empty_tables(district_ids, calendar, lags) -> dict[int, MetricsTable]:
    return {int(lag): MetricsTable.empty(district_ids, calendar, int(lag)) for lag in lags}


def metrics_from_world(world, lags: Iterable[int] = (30,), min_days: int = DEFAULT_MIN_DAYS,
                       max_gap: int = DEFAULT_MAX_GAP, class_of: np.ndarray | None = None) -> dict[int, MetricsTable]:
    """In-memory path: observed days -> segments -> metrics, one subscriber block at a time.

    All events of a synthetic subscriber-day sit in one district, so the
    daily modal district is the true district on every observed day.
    """
    from .spatial import prepare_events
    cal, ids = world.calendar, world.district_ids
    if class_of is None:
        ev = prepare_events(world.violence) if len(world.violence) else None
        class_of = class_map(ids, cal, world.cultivation, ev, world.taliban)
    tables = _empty_tables(ids, cal, lags)
    for sl, obs in world.observed_blocks():
        r, t = np.nonzero(obs)
        dist = world.loc[sl][r, t].astype(np.int16)
        daily = DailyTable(r.astype(np.int64), t.astype(np.int32), dist, np.ones(r.size, np.int32))
        segs = segment_table(daily, min_days, max_gap)
        res = residence_matrix(segs, sl.stop - sl.start, cal.n_days)
        for m in tables.values():
            m.add_residence(res, class_of)
    return tables


def ingest(event_files: Sequence[str], towers: pd.DataFrame, geoms, calendar: StudyCalendar, shard_dir: str,
           n_shards: int = 64, snap_km: float = 1.0) -> tuple[TowerRegistry, RejectionReport, dict]:
    registry = build_registry(towers, geoms, snap_km=snap_km)
    stream = parse_event_stream(event_files, registry, calendar)
    manifest = shard_events(stream, shard_dir, n_shards)
    return registry, stream.report, manifest.to_json()


def iter_shard_residence(shard_paths: Sequence[str], calendar: StudyCalendar, min_days: int = DEFAULT_MIN_DAYS,
                         max_gap: int = DEFAULT_MAX_GAP) -> Iterable[tuple[int, ShardResidence]]:
    for k, p in enumerate(shard_paths):
        if os.path.getsize(p) == 0:
            continue
        yield k, process_shard(read_shard(p), calendar, min_days, max_gap)


def metrics_from_residence(shards: Iterable[ShardResidence], district_ids, calendar: StudyCalendar,
                           class_of: np.ndarray, lags: Iterable[int] = (30,)) -> dict[int, MetricsTable]:
    tables = _empty_tables(district_ids, calendar, lags)
    for sr in shards:
        res = sr.matrix(calendar.n_days)
        for m in tables.values():
            m.add_residence(res, class_of)
    return tables


@dataclass
class PanelInputs:
    provinces: dict
    cultivation: pd.DataFrame
    taliban: dict
    events: pd.DataFrame | None
    covariates: pd.DataFrame | None
    road_index: RoadViolenceIndex | None = None


def world_panel_inputs(world, roads: bool = True) -> PanelInputs:
    from .spatial import prepare_events
    ev = prepare_events(world.violence) if len(world.violence) else None
    idx = RoadViolenceIndex(world.districts, world.roads) if roads else None
    return PanelInputs(world.provinces, world.cultivation, world.taliban, ev, world.covariates, idx)


def builder(metrics, inputs: PanelInputs, high_threshold: float = 1000.0) -> PanelBuilder:
    return PanelBuilder(metrics, inputs.provinces, inputs.cultivation, inputs.taliban, inputs.events,
                        inputs.covariates, inputs.road_index, high_threshold)
