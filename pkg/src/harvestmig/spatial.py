"""Entry-zone buffers, road clipping and violence proximity flags.

Distances and buffers are computed in a local equirectangular projection
centred on each district's centroid (kilometres). shapely provides the
polygon offset and the line/polygon clipping; distances are our own.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import LineString, MultiLineString, Polygon
from shapely.ops import unary_union

from .calendar import StudyCalendar, iso_week_days
from .geo import LocalProjection, geodesic_polyline_distance_km, polyline_distance
from .ingest import DistrictGeometry

ENTRY_BUFFER_KM = 10.0
ROAD_PROXIMITY_KM = 5.0
PRE_PEAK_DAYS = 30
POINT_PRECISIONS = ("exact", "radius25km")
PRECISIONS = ("exact", "radius25km", "district")
EVENT_COLUMNS = ["event_id", "district_id", "iso_week", "deaths", "lon", "lat", "precision"]
# Segments per quarter circle for buffer arcs; area error ~0.2% at 16.
BUFFER_RESOLUTION = 16


class GeometryError(ValueError):
    pass


@dataclass
class Road:
    road_id: str
    coords: np.ndarray  # (n, 2) lon/lat

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.ndim != 2 or len(self.coords) < 2:
            raise GeometryError(f"road {self.road_id} needs at least two vertices")


@dataclass
class RoadNetwork:
    roads: list[Road]

    @classmethod
    def from_geojson(cls, doc: dict) -> "RoadNetwork":
        roads = []
        for f in doc.get("features", []):
            g = f.get("geometry") or {}
            rid = str((f.get("properties") or {}).get("road_id"))
            if g.get("type") == "LineString":
                roads.append(Road(rid, g["coordinates"]))
            elif g.get("type") == "MultiLineString":
                for k, part in enumerate(g["coordinates"]):
                    roads.append(Road(f"{rid}:{k}", part))
            else:
                raise GeometryError(f"road {rid}: unsupported geometry {g.get('type')}")
        return cls(roads)

    @classmethod
    def load(cls, path) -> "RoadNetwork":
        with open(path) as fh:
            return cls.from_geojson(json.load(fh))

    def to_geojson(self) -> dict:
        return {"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {"road_id": r.road_id},
             "geometry": {"type": "LineString", "coordinates": r.coords.tolist()}} for r in self.roads]}


@dataclass
class ViolentEvent:
    event_id: str
    district_id: str
    week: str
    deaths: int
    location: tuple[float, float] | None
    precision: str

    def __post_init__(self):
        if self.deaths < 1:
            raise ValueError(f"event {self.event_id}: deaths must be >= 1")
        if self.precision not in PRECISIONS:
            raise ValueError(f"event {self.event_id}: unknown precision {self.precision!r}")


def load_events(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"event_id": str, "district_id": str, "iso_week": str, "precision": str})
    return prepare_events(df)


def prepare_events(df: pd.DataFrame) -> pd.DataFrame:
    """Validate the event table and attach week_start/week_end dates."""
    missing = set(EVENT_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"event table missing columns {sorted(missing)}")
    df = df.copy()
    df = df[df["district_id"].notna() & df["iso_week"].notna()]
    if (df["deaths"] < 1).any():
        raise ValueError("events must have deaths >= 1")
    bad = ~df["precision"].isin(PRECISIONS)
    if bad.any():
        raise ValueError(f"unknown precision values {sorted(df.loc[bad, 'precision'].unique())}")
    weeks = {w: iso_week_days(w) for w in df["iso_week"].unique()}
    df["week_start"] = df["iso_week"].map(lambda w: weeks[w][0])
    df["week_end"] = df["iso_week"].map(lambda w: weeks[w][1])
    return df.reset_index(drop=True)


def events_to_list(df: pd.DataFrame) -> list[ViolentEvent]:
    out = []
    for r in df.itertuples(index=False):
        loc = None if pd.isna(r.lon) or pd.isna(r.lat) else (float(r.lon), float(r.lat))
        out.append(ViolentEvent(str(r.event_id), str(r.district_id), str(r.iso_week), int(r.deaths), loc,
                                str(r.precision)))
    return out


# ---------------------------------------------------------------------------
# zones and roads

@dataclass
class EntryZone:
    district_id: str
    projection: LocalProjection
    ring: Polygon          # planar km coordinates
    buffer_km: float

    @property
    def area_km2(self) -> float:
        return float(self.ring.area)

    @property
    def is_empty(self) -> bool:
        return self.ring.is_empty

    def contains(self, lon, lat) -> np.ndarray:
        x, y = self.projection.forward(lon, lat)
        return shapely.covers(self.ring, shapely.points(np.atleast_1d(x), np.atleast_1d(y)))


def _district_polygon(district: DistrictGeometry, proj: LocalProjection) -> Polygon:
    parts = []
    for poly in district.polygons:
        shell = proj.forward_coords(poly[0])
        holes = [proj.forward_coords(h) for h in poly[1:]]
        p = Polygon(shell, holes)
        if not p.is_valid or p.area <= 0:
            raise GeometryError(f"district {district.district_id}: degenerate polygon")
        parts.append(p)
    return unary_union(parts)


def entry_zone(district: DistrictGeometry, buffer_km: float = ENTRY_BUFFER_KM) -> EntryZone:
    """Ring between the district boundary and its outward ``buffer_km`` offset."""
    try:
        cx, cy = district.centroid()
    except Exception as exc:
        raise GeometryError(f"district {district.district_id}: degenerate polygon") from exc
    proj = LocalProjection(cx, cy)
    poly = _district_polygon(district, proj)
    if buffer_km <= 0:
        return EntryZone(district.district_id, proj, Polygon(), float(buffer_km))
    outer = poly.buffer(buffer_km, quad_segs=BUFFER_RESOLUTION)
    return EntryZone(district.district_id, proj, outer.difference(poly), float(buffer_km))


def roads_in_zone(roads: RoadNetwork | Sequence[Road], zone: EntryZone) -> list[np.ndarray]:
    """Pieces of every road inside the zone, as planar (km) polylines."""
    items = roads.roads if isinstance(roads, RoadNetwork) else roads
    if zone.is_empty:
        return []
    pieces: list[np.ndarray] = []
    for r in items:
        line = LineString(zone.projection.forward_coords(r.coords))
        if not line.intersects(zone.ring):
            continue
        clipped = line.intersection(zone.ring)
        pieces.extend(_lines_of(clipped))
    return pieces


def _lines_of(geom) -> list[np.ndarray]:
    if geom.is_empty:
        return []
    if isinstance(geom, LineString):
        return [np.asarray(geom.coords)] if geom.length > 0 else []
    if isinstance(geom, MultiLineString) or hasattr(geom, "geoms"):
        out = []
        for g in geom.geoms:
            out.extend(_lines_of(g))
        return out
    return []  # isolated touch points


def merged_pieces(pieces: list[np.ndarray]) -> list[np.ndarray]:
    """Join clipped pieces sharing endpoints (shapely may split at ring vertices)."""
    if not pieces:
        return []
    merged = shapely.line_merge(MultiLineString([LineString(p) for p in pieces]))
    return _lines_of(merged)


def distance_to_pieces_km(lon, lat, pieces: list[np.ndarray], proj: LocalProjection) -> np.ndarray:
    """Great-circle distance from points to clipped road pieces."""
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    best = np.full(lon.shape, np.inf)
    for p in pieces:
        best = np.minimum(best, geodesic_polyline_distance_km(lon, lat, proj.inverse_coords(p)))
    return best


def planar_distance_to_pieces_km(lon, lat, pieces: list[np.ndarray], proj: LocalProjection) -> np.ndarray:
    x, y = proj.forward(np.atleast_1d(lon), np.atleast_1d(lat))
    best = np.full(x.shape, np.inf)
    for p in pieces:
        best = np.minimum(best, polyline_distance(x, y, p))
    return best


# ---------------------------------------------------------------------------
# flags

def week_overlaps(week_start, week_end, t0: dt.date, days: int = PRE_PEAK_DAYS):
    """Any day of the week falls in [t0 - days, t0 - 1]."""
    lo = t0 - dt.timedelta(days=days)
    hi = t0 - dt.timedelta(days=1)
    return (np.asarray(week_start) <= hi) & (np.asarray(week_end) >= lo)


def district_violence_stats(district_id: str, t0: dt.date, events: pd.DataFrame,
                            days: int = PRE_PEAK_DAYS) -> tuple[int, int]:
    """(number of events, total deaths) in the district in the pre-peak window."""
    ev = events[events["district_id"] == district_id]
    if ev.empty:
        return 0, 0
    hit = week_overlaps(ev["week_start"].to_numpy(), ev["week_end"].to_numpy(), t0, days)
    return int(hit.sum()), int(ev.loc[hit, "deaths"].sum())


def district_violence_flag(district_id: str, t0: dt.date, events: pd.DataFrame,
                           days: int = PRE_PEAK_DAYS) -> bool:
    return district_violence_stats(district_id, t0, events, days)[0] > 0


@dataclass
class RoadViolenceIndex:
    """Entry zones and clipped roads per district, computed once."""

    districts: Sequence[DistrictGeometry]
    roads: RoadNetwork
    buffer_km: float = ENTRY_BUFFER_KM
    road_km: float = ROAD_PROXIMITY_KM
    precisions: tuple = POINT_PRECISIONS
    _cache: dict = field(default_factory=dict, repr=False)

    def pieces(self, district_id: str) -> tuple[EntryZone, list[np.ndarray]]:
        if district_id not in self._cache:
            g = next(d for d in self.districts if d.district_id == district_id)
            zone = entry_zone(g, self.buffer_km)
            self._cache[district_id] = (zone, roads_in_zone(self.roads, zone))
        return self._cache[district_id]

    def flag(self, district_id: str, t0: dt.date, events: pd.DataFrame,
             road_km: float | None = None, days: int = PRE_PEAK_DAYS,
             precisions: Iterable[str] | None = None) -> bool:
        road_km = self.road_km if road_km is None else road_km
        precisions = self.precisions if precisions is None else precisions
        zone, pieces = self.pieces(district_id)
        if not pieces:
            return False
        ev = events[events["precision"].isin(tuple(precisions)) & events["lon"].notna() & events["lat"].notna()]
        if ev.empty:
            return False
        ev = ev[week_overlaps(ev["week_start"].to_numpy(), ev["week_end"].to_numpy(), t0, days)]
        if ev.empty:
            return False
        lon, lat = ev["lon"].to_numpy(float), ev["lat"].to_numpy(float)
        # planar distance is within a few percent; refine only plausible events
        near = planar_distance_to_pieces_km(lon, lat, pieces, zone.projection) <= road_km * 1.05 + 0.5
        if not near.any():
            return False
        d = distance_to_pieces_km(lon[near], lat[near], pieces, zone.projection)
        return bool((d <= road_km).any())


def road_violence_flag(district: DistrictGeometry, t0: dt.date, roads: RoadNetwork, events: pd.DataFrame,
                       buffer_km: float = ENTRY_BUFFER_KM, road_km: float = ROAD_PROXIMITY_KM,
                       days: int = PRE_PEAK_DAYS, precisions: Iterable[str] = POINT_PRECISIONS) -> bool:
    """Fatal event within ``road_km`` of an entry road in the month before t0."""
    idx = RoadViolenceIndex([district], roads, buffer_km)
    return idx.flag(district.district_id, t0, events, road_km, days, precisions)


def violence_day_matrix(events: pd.DataFrame, district_ids: Sequence[str], calendar: StudyCalendar,
                        days: int = PRE_PEAK_DAYS) -> np.ndarray:
    """(district x day) flag: some event week overlaps [t - days, t - 1]."""
    nd, nt = len(district_ids), calendar.n_days
    out = np.zeros((nd, nt), dtype=bool)
    dindex = {d: i for i, d in enumerate(district_ids)}
    for r in events.itertuples(index=False):
        i = dindex.get(str(r.district_id))
        if i is None:
            continue
        # The window for day t covers week days when t in [week_start + 1, week_end + days].
        a = calendar.index(r.week_start) + 1
        b = calendar.index(r.week_end) + days
        a, b = max(a, 0), min(b, nt - 1)
        if a <= b:
            out[i, a:b + 1] = True
    return out
