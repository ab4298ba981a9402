"""Small planar geometry kernels shared by the map and simulator modules."""
from __future__ import annotations

import numpy as np


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points p (n,2) to segments a->b (m,2 each); returns (n, m)."""
    p = np.atleast_2d(p)[:, None, :]
    a = np.atleast_2d(a)[None, :, :]
    b = np.atleast_2d(b)[None, :, :]
    ab = b - a
    denom = (ab * ab).sum(-1)
    t = np.where(denom > 0, ((p - a) * ab).sum(-1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.sqrt(((p - closest) ** 2).sum(-1))


def polyline_distance(p: np.ndarray, line: np.ndarray) -> np.ndarray:
    """Distance from each point in p (n,2) to a polyline (k,2)."""
    return point_segment_distance(p, line[:-1], line[1:]).min(axis=1)


def points_in_polygon(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule with a half-open crossing test; poly is an open ring (k,2)."""
    p = np.atleast_2d(p)
    x, y = p[:, 0][:, None], p[:, 1][:, None]
    a = poly
    b = np.roll(poly, -1, axis=0)
    ya, yb = a[:, 1][None, :], b[:, 1][None, :]
    straddle = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = a[:, 0][None, :] + (y - ya) * (b[:, 0] - a[:, 0])[None, :] / (yb - ya)
    crossings = straddle & (x < xc)
    return (crossings.sum(axis=1) % 2) == 1


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def segments_intersect(p1, p2, q1, q2) -> bool:
    """Closed-segment intersection test (touching counts)."""
    p1, p2, q1, q2 = map(np.asarray, (p1, p2, q1, q2))
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])) and (min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    if d1 == 0 and on_seg(q1, q2, p1):
        return True
    if d2 == 0 and on_seg(q1, q2, p2):
        return True
    if d3 == 0 and on_seg(p1, p2, q1):
        return True
    if d4 == 0 and on_seg(p1, p2, q2):
        return True
    return False


def polygon_is_simple(poly: np.ndarray) -> bool:
    """True if no two non-adjacent edges of the closed ring touch."""
    poly = np.asarray(poly, dtype=float)
    n = len(poly)
    if n < 3:
        return False
    a = poly
    b = np.roll(poly, -1, axis=0)
    if np.any(np.all(a == b, axis=1)):
        return False
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))  # first and last edges share a vertex
    i, j = i[keep], j[keep]
    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    if proper.any():
        return False

    def on_seg(s0, s1, c, d):
        return (d == 0) & (np.minimum(s0[:, 0], s1[:, 0]) <= c[:, 0]) & (c[:, 0] <= np.maximum(s0[:, 0], s1[:, 0])) \
            & (np.minimum(s0[:, 1], s1[:, 1]) <= c[:, 1]) & (c[:, 1] <= np.maximum(s0[:, 1], s1[:, 1]))

    touch = on_seg(q1, q2, p1, d1) | on_seg(q1, q2, p2, d2) | on_seg(p1, p2, q1, d3) | on_seg(p1, p2, q2, d4)
    return not touch.any()


def rect_corners(cx: float, cy: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners (4,2) of an oriented rectangle, counterclockwise."""
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ rotation(yaw).T + np.array([cx, cy])


def sat_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons given as (k,2) corner arrays.

    Touching boundaries count as overlap.
    """
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        axes = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        for ax in axes:
            pa, pb = a @ ax, b @ ax
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def polygon_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two convex polygons; 0 when they overlap."""
    if sat_overlap(a, b):
        return 0.0
    a2, b2 = np.roll(a, -1, axis=0), np.roll(b, -1, axis=0)
    return float(min(point_segment_distance(a, b, b2).min(), point_segment_distance(b, a, a2).min()))
