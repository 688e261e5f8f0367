"""Raw input parsing: event streams, tower registry, district geometry.

Events are streamed in Arrow record batches and partitioned into shards by
a stable hash of the subscriber id so that each subscriber's full history
lands in exactly one shard.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv
import pyarrow.ipc as paipc
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import UNLOCATED
from .calendar import StudyCalendar
from .geo import (
    EARTH_RADIUS_KM,
    haversine_km,
    points_in_rings,
    points_on_rings,
    ring_is_simple,
    segment_distance,
    unit_vectors,
)

log = logging.getLogger(__name__)

EVENT_COLUMNS = ["subscriber_id", "timestamp", "tower_id"]
TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
GROUP_THRESHOLD_M = 100.0

# Rejection categories.
MALFORMED = "malformed"
BAD_TIMESTAMP = "bad_timestamp"
OUT_OF_RANGE = "out_of_range"
UNKNOWN_TOWER = "unknown_tower"


class IngestError(RuntimeError):
    """Fatal input problem (unreadable file, bad header, bad geometry)."""


# ---------------------------------------------------------------------------
# Geometry

@dataclass
class DistrictGeometry:
    district_id: str
    province_id: str
    # Polygons, each a list of rings (outer first, then holes), lon/lat.
    polygons: list[list[np.ndarray]]

    @property
    def rings(self) -> list[np.ndarray]:
        return [r for poly in self.polygons for r in poly]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        allc = np.vstack(self.rings)
        return allc[:, 0].min(), allc[:, 1].min(), allc[:, 0].max(), allc[:, 1].max()

    def centroid(self) -> tuple[float, float]:
        """Area-weighted centroid of the outer rings (shoelace)."""
        cx = cy = area = 0.0
        for poly in self.polygons:
            r = poly[0]
            x, y = r[:, 0], r[:, 1]
            x1, y1 = np.roll(x, -1), np.roll(y, -1)
            cross = x * y1 - x1 * y
            a = cross.sum() / 2
            cx += ((x + x1) * cross).sum() / 6
            cy += ((y + y1) * cross).sum() / 6
            area += a
        if area == 0:
            raise IngestError(f"district {self.district_id} has zero area")
        return cx / area, cy / area


def _close_ring(coords) -> np.ndarray:
    r = np.asarray(coords, dtype=float)
    if r.ndim != 2 or r.shape[1] < 2 or len(r) < 4:
        raise IngestError("ring needs at least 4 positions")
    r = r[:, :2]
    if not np.array_equal(r[0], r[-1]):
        raise IngestError("ring is not closed")
    return r


def load_districts(path: str | os.PathLike, check_simple: bool = True) -> list[DistrictGeometry]:
    """Read a GeoJSON FeatureCollection of district polygons."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read district geometry {path}: {exc}") from exc
    return districts_from_geojson(doc, check_simple=check_simple)


def districts_from_geojson(doc: dict, check_simple: bool = True) -> list[DistrictGeometry]:
    out: list[DistrictGeometry] = []
    seen = set()
    for feat in doc.get("features", []):
        props = feat.get("properties") or {}
        did = props.get("district_id")
        pid = props.get("province_id")
        if did is None or pid is None:
            raise IngestError("district feature lacks district_id/province_id")
        did, pid = str(did), str(pid)
        if did in seen:
            raise IngestError(f"duplicate district_id {did}")
        seen.add(did)
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            raw = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            raw = geom["coordinates"]
        else:
            raise IngestError(f"district {did}: unsupported geometry {geom.get('type')}")
        polys = []
        for poly in raw:
            rings = []
            for ring in poly:
                try:
                    r = _close_ring(ring)
                except IngestError as exc:
                    raise IngestError(f"district {did}: {exc}") from None
                if check_simple and not ring_is_simple(r):
                    raise IngestError(f"district {did}: self-intersecting ring")
                rings.append(r)
            polys.append(rings)
        out.append(DistrictGeometry(did, pid, polys))
    if not out:
        raise IngestError("geometry file contains no districts")
    return out


def districts_to_geojson(geoms: Sequence[DistrictGeometry]) -> dict:
    feats = []
    for g in geoms:
        coords = [[r.tolist() for r in poly] for poly in g.polygons]
        geom = ({"type": "Polygon", "coordinates": coords[0]} if len(coords) == 1
                else {"type": "MultiPolygon", "coordinates": coords})
        feats.append({"type": "Feature",
                      "properties": {"district_id": g.district_id, "province_id": g.province_id},
                      "geometry": geom})
    return {"type": "FeatureCollection", "features": feats}


def assign_districts(lon, lat, geoms: Sequence[DistrictGeometry]) -> np.ndarray:
    """Vectorised point-in-polygon; returns indices into ``geoms`` or UNLOCATED.

    A point on a shared edge goes to the lexicographically smallest
    district_id among the polygons it touches.
    """
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    result = np.full(lon.shape, UNLOCATED, dtype=np.int32)
    best_id = np.full(lon.shape, None, dtype=object)
    for k in np.argsort([g.district_id for g in geoms], kind="stable"):
        g = geoms[k]
        x0, y0, x1, y1 = g.bbox
        cand = np.flatnonzero((result == UNLOCATED) & (lon >= x0) & (lon <= x1) & (lat >= y0) & (lat <= y1))
        if cand.size == 0:
            continue
        rings = g.rings
        hit = points_in_rings(lon[cand], lat[cand], rings) | points_on_rings(lon[cand], lat[cand], rings)
        # Districts are visited in id order, so the first hit is the smallest id.
        result[cand[hit]] = k
        best_id[cand[hit]] = g.district_id
    return result


def assign_district(point: tuple[float, float], geoms: Sequence[DistrictGeometry]) -> str | None:
    """District id containing ``point`` (lon, lat), or None when unlocated."""
    k = int(assign_districts([point[0]], [point[1]], geoms)[0])
    return None if k == UNLOCATED else geoms[k].district_id


def distance_to_boundary_km(lon: float, lat: float, g: DistrictGeometry) -> float:
    """Approximate distance from a point to a district boundary, in km."""
    kx = np.radians(1.0) * EARTH_RADIUS_KM * np.cos(np.radians(lat))
    ky = np.radians(1.0) * EARTH_RADIUS_KM
    best = np.inf
    for r in g.rings:
        for (x1, y1), (x2, y2) in zip(r[:-1], r[1:]):
            d = segment_distance(0.0, 0.0, (x1 - lon) * kx, (y1 - lat) * ky, (x2 - lon) * kx, (y2 - lat) * ky)
            best = min(best, float(d))
    return best


# ---------------------------------------------------------------------------
# Towers

@dataclass
class TowerGroup:
    group_id: int
    member_tower_ids: list[str]
    centroid: tuple[float, float]
    district_id: str | None = None


def group_towers(towers: Iterable[tuple[str, float, float]],
                 threshold_m: float = GROUP_THRESHOLD_M) -> list[TowerGroup]:
    """Single-linkage clusters of towers closer than ``threshold_m`` metres.

    Group ids follow the order of each group's smallest member id, so the
    result does not depend on input order.
    """
    rows = sorted((str(t), float(x), float(y)) for t, x, y in towers)
    if not rows:
        return []
    ids = [r[0] for r in rows]
    if len(set(ids)) != len(ids):
        raise IngestError("duplicate tower_id in tower registry")
    lon = np.array([r[1] for r in rows])
    lat = np.array([r[2] for r in rows])
    n = len(rows)
    xyz = unit_vectors(lon, lat)
    # Chord length slightly above the threshold; exact test below.
    chord = 2 * np.sin((threshold_m / 1000.0) / EARTH_RADIUS_KM / 2) * 1.001
    pairs = cKDTree(xyz).query_pairs(chord, output_type="ndarray")
    if len(pairs):
        d_m = haversine_km(lon[pairs[:, 0]], lat[pairs[:, 0]], lon[pairs[:, 1]], lat[pairs[:, 1]]) * 1000
        pairs = pairs[d_m < threshold_m]
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    _, labels = connected_components(adj, directed=False)
    members: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        members.setdefault(int(lab), []).append(i)
    # ids are sorted, so a group's smallest member is its first index.
    ordered = sorted(members.values(), key=lambda m: m[0])
    return [
        TowerGroup(gid, [ids[i] for i in m], (float(lon[m].mean()), float(lat[m].mean())))
        for gid, m in enumerate(ordered)
    ]


@dataclass
class TowerRegistry:
    """Tower id -> group -> district index, all read-only after build."""

    district_ids: list[str]
    groups: list[TowerGroup]
    tower_ids: np.ndarray            # sorted unique ids
    tower_group: np.ndarray          # group index per tower
    tower_district: np.ndarray       # district index per tower (UNLOCATED allowed)
    _index: pd.Index = field(init=False, repr=False)

    def __post_init__(self):
        self._index = pd.Index(self.tower_ids)

    def lookup(self, tower_ids) -> np.ndarray:
        """Registry positions for tower ids; -1 where unknown."""
        return self._index.get_indexer(tower_ids)

    def district_of(self, tower_ids) -> np.ndarray:
        pos = self.lookup(tower_ids)
        out = np.full(len(pos), UNLOCATED, dtype=np.int16)
        ok = pos >= 0
        out[ok] = self.tower_district[pos[ok]]
        return out


def load_towers(path: str | os.PathLike) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={"tower_id": str})
    except (OSError, pd.errors.ParserError) as exc:
        raise IngestError(f"cannot read tower file {path}: {exc}") from exc
    missing = {"tower_id", "lon", "lat"} - set(df.columns)
    if missing:
        raise IngestError(f"tower file {path} missing columns {sorted(missing)}")
    bad = ~(df.lon.between(-180, 180) & df.lat.between(-90, 90))
    if bad.any():
        raise IngestError(f"tower file {path}: {int(bad.sum())} rows with invalid coordinates")
    return df[["tower_id", "lon", "lat"]]


def build_registry(towers: pd.DataFrame, geoms: Sequence[DistrictGeometry],
                   snap_km: float = 1.0, threshold_m: float = GROUP_THRESHOLD_M) -> TowerRegistry:
    """Group towers and place each group in a district.

    A group centroid outside every polygon is snapped to the nearest
    district when within ``snap_km`` of its boundary; otherwise it is
    unlocated and its events are excluded downstream.
    """
    groups = group_towers(zip(towers.tower_id, towers.lon, towers.lat), threshold_m)
    cx = np.array([g.centroid[0] for g in groups])
    cy = np.array([g.centroid[1] for g in groups])
    gidx = assign_districts(cx, cy, geoms)
    for i in np.flatnonzero(gidx == UNLOCATED):
        dists = [distance_to_boundary_km(cx[i], cy[i], g) for g in geoms]
        j = int(np.argmin(dists))
        if dists[j] <= snap_km:
            gidx[i] = j
    for g, k in zip(groups, gidx):
        g.district_id = None if k == UNLOCATED else geoms[k].district_id
    tower_ids, tower_group = [], []
    for g in groups:
        for t in g.member_tower_ids:
            tower_ids.append(t)
            tower_group.append(g.group_id)
    order = np.argsort(tower_ids, kind="stable")
    tower_ids = np.asarray(tower_ids, dtype=object)[order]
    tower_group = np.asarray(tower_group)[order]
    return TowerRegistry(
        district_ids=[g.district_id for g in geoms],
        groups=groups,
        tower_ids=tower_ids,
        tower_group=tower_group,
        tower_district=gidx[tower_group].astype(np.int16),
    )


# ---------------------------------------------------------------------------
# Event stream

@dataclass(frozen=True)
class CdrEvent:
    subscriber_id: str
    timestamp: pd.Timestamp
    tower_id: str


@dataclass
class RejectionReport:
    rows: Counter = field(default_factory=Counter)        # (file, category) -> count
    input_rows: Counter = field(default_factory=Counter)  # file -> rows seen
    parsed_rows: Counter = field(default_factory=Counter)
    unlocated: Counter = field(default_factory=Counter)   # parsed but outside every district

    def add(self, file: str, category: str, n: int):
        if n:
            self.rows[(file, category)] += int(n)

    def count(self, category: str, file: str | None = None) -> int:
        return sum(v for (f, c), v in self.rows.items() if c == category and (file is None or f == file))

    def rejected(self, file: str) -> int:
        return sum(v for (f, _), v in self.rows.items() if f == file)

    def to_frame(self) -> pd.DataFrame:
        recs = [{"file": f, "category": c, "count": n} for (f, c), n in sorted(self.rows.items())]
        return pd.DataFrame(recs, columns=["file", "category", "count"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


@dataclass
class EventBatch:
    """Columnar block of validated events."""

    subscriber_id: pa.Array   # string
    ts: np.ndarray            # int64 epoch seconds, UTC
    tower_id: pa.Array        # string
    district: np.ndarray      # int16 district index or UNLOCATED

    def __len__(self) -> int:
        return len(self.ts)

    def events(self) -> Iterator[CdrEvent]:
        subs = self.subscriber_id.to_pylist()
        towers = self.tower_id.to_pylist()
        for s, t, tw in zip(subs, self.ts, towers):
            yield CdrEvent(s, pd.Timestamp(int(t), unit="s", tz="UTC"), tw)


class EventStream:
    """Iterable over validated :class:`EventBatch` blocks from event CSVs.

    Malformed rows, unparseable or out-of-range timestamps, and unknown
    towers are counted per file in :attr:`report` and skipped.
    """

    def __init__(self, files: Sequence[str | os.PathLike], registry: TowerRegistry,
                 calendar: StudyCalendar | None = None, block_size: int = 1 << 24):
        self.files = [str(f) for f in files]
        self.registry = registry
        self.calendar = calendar
        self.block_size = block_size
        self.report = RejectionReport()

    def __iter__(self) -> Iterator[EventBatch]:
        for f in self.files:
            yield from self._read_file(f)

    def _read_file(self, path: str) -> Iterator[EventBatch]:
        name = os.path.basename(path)
        bad_rows = [0]

        def on_invalid(row):
            bad_rows[0] += 1
            return "skip"

        try:
            reader = pacsv.open_csv(
                path,
                read_options=pacsv.ReadOptions(block_size=self.block_size),
                parse_options=pacsv.ParseOptions(invalid_row_handler=on_invalid),
                convert_options=pacsv.ConvertOptions(
                    column_types={c: pa.string() for c in EVENT_COLUMNS},
                    strings_can_be_null=False,
                ),
            )
        except (OSError, pa.ArrowInvalid) as exc:
            raise IngestError(f"cannot read event file {path}: {exc}") from exc
        if reader.schema.names != EVENT_COLUMNS:
            raise IngestError(f"event file {path}: header {reader.schema.names} != {EVENT_COLUMNS}")
        rep = self.report
        lo_hi = self.calendar.ts_bounds() if self.calendar else None
        while True:
            try:
                rb = reader.read_next_batch()
            except StopIteration:
                break
            except pa.ArrowInvalid as exc:
                raise IngestError(f"event file {path}: {exc}") from exc
            n = rb.num_rows
            rep.input_rows[name] += n
            sub, ts_s, tower = rb.column(0), rb.column(1), rb.column(2)
            empty = pc.or_(pc.or_(pc.equal(pc.utf8_length(sub), 0), pc.equal(pc.utf8_length(ts_s), 0)),
                           pc.equal(pc.utf8_length(tower), 0))
            empty = empty.to_numpy(zero_copy_only=False)
            ts = _parse_timestamps(ts_s)
            bad_ts = ~empty & np.isnan(ts)
            keep = ~empty & ~bad_ts
            tsi = np.where(keep, ts, 0).astype(np.int64)
            out_range = np.zeros(n, dtype=bool)
            if lo_hi is not None:
                out_range = keep & ((tsi < lo_hi[0]) | (tsi >= lo_hi[1]))
                keep &= ~out_range
            pos = self.registry.lookup(tower.to_numpy(zero_copy_only=False))
            unknown = keep & (pos < 0)
            keep &= ~unknown
            rep.add(name, MALFORMED, int(empty.sum()))
            rep.add(name, BAD_TIMESTAMP, int(bad_ts.sum()))
            rep.add(name, OUT_OF_RANGE, int(out_range.sum()))
            rep.add(name, UNKNOWN_TOWER, int(unknown.sum()))
            idx = np.flatnonzero(keep)
            if idx.size == 0:
                continue
            take = pa.array(idx)
            district = self.registry.tower_district[pos[idx]]
            rep.parsed_rows[name] += int(idx.size)
            rep.unlocated[name] += int((district == UNLOCATED).sum())
            yield EventBatch(sub.take(take), tsi[idx], tower.take(take), district)
        # Rows the CSV reader skipped never reached a batch.
        rep.input_rows[name] += bad_rows[0]
        rep.add(name, MALFORMED, bad_rows[0])


def _parse_timestamps(col: pa.Array) -> np.ndarray:
    """Strict RFC3339 UTC ('Z' or '+00:00') parse; NaN where invalid."""
    col = pc.replace_substring_regex(col, r"\+00:00$", "Z")
    parsed = pc.strptime(col, format=TS_FORMAT, unit="s", error_is_null=True)
    # strptime normalises impossible dates (Feb 30 -> Mar 2); round-trip to reject them.
    back = pc.strftime(parsed, format=TS_FORMAT)
    ok = pc.fill_null(pc.equal(back, col), False).to_numpy(zero_copy_only=False)
    vals = pc.cast(parsed, pa.int64()).to_numpy(zero_copy_only=False)
    out = np.asarray(vals, dtype=float)
    out[~ok] = np.nan
    return out


def parse_event_stream(files: Sequence[str | os.PathLike], registry: TowerRegistry,
                       calendar: StudyCalendar | None = None) -> EventStream:
    """Validated event stream over ``files``; consume it, then read ``.report``."""
    return EventStream(files, registry, calendar)


# ---------------------------------------------------------------------------
# Sharding

SHARD_SCHEMA = pa.schema([("subscriber_id", pa.string()), ("ts", pa.int64()), ("district", pa.int16())])


def shard_of(subscriber_ids, n_shards: int) -> np.ndarray:
    """Stable shard number per subscriber id (siphash with pandas' fixed key)."""
    arr = subscriber_ids if isinstance(subscriber_ids, (pa.Array, pa.ChunkedArray)) else pa.array(subscriber_ids, pa.string())
    enc = pc.dictionary_encode(arr)
    if isinstance(enc, pa.ChunkedArray):
        enc = enc.combine_chunks()
    uniq = np.asarray(enc.dictionary.to_numpy(zero_copy_only=False), dtype=object)
    h = pd.util.hash_array(uniq, categorize=False) % np.uint64(n_shards)
    return h.astype(np.int32)[enc.indices.to_numpy(zero_copy_only=False)]


@dataclass
class ShardManifest:
    paths: list[str]
    counts: list[int]
    unlocated: int = 0

    def to_json(self) -> dict:
        return {"paths": self.paths, "counts": self.counts, "unlocated": self.unlocated}


def shard_path(out_dir: str | os.PathLike, k: int) -> str:
    return os.path.join(out_dir, f"events-{k:04d}.arrow")


def shard_events(stream: Iterable[EventBatch], out_dir: str | os.PathLike, n_shards: int = 64) -> ShardManifest:
    """Write located events into ``n_shards`` Arrow IPC files by subscriber hash."""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    paths = [shard_path(out_dir, k) for k in range(n_shards)]
    writers = [paipc.new_file(p, SHARD_SCHEMA) for p in paths]
    counts = np.zeros(n_shards, dtype=np.int64)
    unlocated = 0
    try:
        for batch in stream:
            located = batch.district != UNLOCATED
            unlocated += int((~located).sum())
            idx = np.flatnonzero(located)
            if idx.size == 0:
                continue
            subs = batch.subscriber_id.take(pa.array(idx))
            shard = shard_of(subs, n_shards)
            order = np.argsort(shard, kind="stable")
            bounds = np.searchsorted(shard[order], np.arange(n_shards + 1))
            rb = pa.record_batch(
                [subs, pa.array(batch.ts[idx]), pa.array(batch.district[idx])], schema=SHARD_SCHEMA
            ).take(pa.array(order))
            for k in range(n_shards):
                a, b = bounds[k], bounds[k + 1]
                if b > a:
                    writers[k].write_batch(rb.slice(a, b - a))
                    counts[k] += b - a
    finally:
        for w in writers:
            w.close()
    return ShardManifest(paths, counts.tolist(), unlocated)


def read_shard(path: str | os.PathLike) -> pa.Table:
    with pa.memory_map(str(path)) as src:
        return paipc.open_file(src).read_all()
