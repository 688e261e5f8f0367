"""Low-level planar and spherical geometry on lon/lat coordinates."""

from __future__ import annotations

import numpy as np

EARTH_RADIUS_KM = 6371.0088
# Tolerance (degrees) for treating a point as lying on a polygon edge.
EDGE_EPS_DEG = 1e-9


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance on a spherical Earth, vectorised."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=float)) for v in (lon1, lat1, lon2, lat2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def unit_vectors(lon, lat) -> np.ndarray:
    lon = np.radians(np.asarray(lon, dtype=float))
    lat = np.radians(np.asarray(lat, dtype=float))
    return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


class LocalProjection:
    """Equirectangular projection to kilometres around a fixed origin.

    Affine in lon/lat, so segments that are straight in lon/lat stay straight.
    Used for polygon buffering and clipping; point-to-road distances are
    measured on the sphere.
    """

    def __init__(self, lon0: float, lat0: float):
        self.lon0 = float(lon0)
        self.lat0 = float(lat0)
        self._kx = np.radians(1.0) * EARTH_RADIUS_KM * np.cos(np.radians(self.lat0))
        self._ky = np.radians(1.0) * EARTH_RADIUS_KM

    def forward(self, lon, lat):
        x = (np.asarray(lon, dtype=float) - self.lon0) * self._kx
        y = (np.asarray(lat, dtype=float) - self.lat0) * self._ky
        return x, y

    def inverse(self, x, y):
        return (np.asarray(x, dtype=float) / self._kx + self.lon0,
                np.asarray(y, dtype=float) / self._ky + self.lat0)

    def forward_coords(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=float).reshape(-1, 2)
        x, y = self.forward(c[:, 0], c[:, 1])
        return np.column_stack([x, y])

    def inverse_coords(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=float).reshape(-1, 2)
        lon, lat = self.inverse(c[:, 0], c[:, 1])
        return np.column_stack([lon, lat])


def _ring_edges(ring: np.ndarray):
    ring = np.asarray(ring, dtype=float)
    if len(ring) and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    return ring, np.roll(ring, -1, axis=0)


def points_in_rings(px: np.ndarray, py: np.ndarray, rings) -> np.ndarray:
    """Even-odd ray casting over a set of rings (outer rings and holes)."""
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    inside = np.zeros(px.shape, dtype=bool)
    for ring in rings:
        a, b = _ring_edges(ring)
        for (x1, y1), (x2, y2) in zip(a, b):
            crosses = (y1 > py) != (y2 > py)
            if not crosses.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < xint)
    return inside


def points_on_rings(px, py, rings, eps: float = EDGE_EPS_DEG) -> np.ndarray:
    """True where a point lies on some ring edge (within ``eps``)."""
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    on = np.zeros(px.shape, dtype=bool)
    for ring in rings:
        a, b = _ring_edges(ring)
        for (x1, y1), (x2, y2) in zip(a, b):
            on |= segment_distance(px, py, x1, y1, x2, y2) <= eps
    return on


def segment_distance(px, py, x1, y1, x2, y2):
    """Euclidean distance from points to the segment (x1,y1)-(x2,y2)."""
    dx = x2 - x1
    dy = y2 - y1
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(px - x1, py - y1)
    t = np.clip(((px - x1) * dx + (py - y1) * dy) / L2, 0.0, 1.0)
    return np.hypot(px - (x1 + t * dx), py - (y1 + t * dy))


def polyline_distance(px, py, line: np.ndarray):
    """Minimum distance from points to a planar polyline (N x 2 vertices)."""
    line = np.asarray(line, dtype=float)
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    best = np.full(px.shape, np.inf)
    for (x1, y1), (x2, y2) in zip(line[:-1], line[1:]):
        best = np.minimum(best, segment_distance(px, py, x1, y1, x2, y2))
    return best


GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def geodesic_polyline_distance_km(lon, lat, line: np.ndarray, max_piece_km: float = 2.0,
                                  iters: int = 60) -> np.ndarray:
    """Great-circle distance from points to a polyline with lon/lat-linear segments.

    Segments are cut into pieces of at most ``max_piece_km`` so the distance
    along each piece is unimodal, then a golden-section search finds the
    nearest point of every piece.
    """
    px = np.atleast_1d(np.asarray(lon, dtype=float))[:, None]
    py = np.atleast_1d(np.asarray(lat, dtype=float))[:, None]
    line = np.asarray(line, dtype=float)
    best = np.full(px.shape[0], np.inf)
    for a, b in zip(line[:-1], line[1:]):
        n = max(1, int(np.ceil(haversine_km(a[0], a[1], b[0], b[1]) / max_piece_km)))
        knots = a + (b - a) * np.linspace(0.0, 1.0, n + 1)[:, None]
        s0, s1 = knots[:-1][None, :, :], knots[1:][None, :, :]

        def f(t):
            q = s0 + (s1 - s0) * t[..., None]
            return haversine_km(px, py, q[..., 0], q[..., 1])
        lo = np.zeros((px.shape[0], n))
        hi = np.ones_like(lo)
        for _ in range(iters):
            c = hi - GOLDEN * (hi - lo)
            d = lo + GOLDEN * (hi - lo)
            left = f(c) < f(d)
            hi = np.where(left, d, hi)
            lo = np.where(left, lo, c)
        cand = np.minimum(f(0.5 * (lo + hi)), np.minimum(f(np.zeros_like(lo)), f(np.ones_like(lo))))
        best = np.minimum(best, cand.min(axis=1))
    return best


def ring_is_simple(ring) -> bool:
    """O(n^2) check that non-adjacent edges of a closed ring do not intersect."""
    a, b = _ring_edges(ring)
    n = len(a)
    if n < 3:
        return False

    def orient(p, q, r):
        v = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    def on_seg(p, q, r):
        return min(p[0], r[0]) <= q[0] <= max(p[0], r[0]) and min(p[1], r[1]) <= q[1] <= max(p[1], r[1])

    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            p1, q1, p2, q2 = a[i], b[i], a[j], b[j]
            o1, o2, o3, o4 = orient(p1, q1, p2), orient(p1, q1, q2), orient(p2, q2, p1), orient(p2, q2, q1)
            if o1 != o2 and o3 != o4:
                return False
            if o1 == 0 and on_seg(p1, p2, q1):
                return False
            if o2 == 0 and on_seg(p1, q2, q1):
                return False
            if o3 == 0 and on_seg(p2, p1, q2):
                return False
            if o4 == 0 and on_seg(p2, q1, q2):
                return False
    return True
