"""Vector HD map: storage, radius queries, ego transform and rasterization.

Rasterization convention for an ego point (f forward, l left) on a grid of
``size`` pixels at ``resolution`` m/px, with E = size * resolution / 2::

    col = floor((E - l) / resolution)
    row = floor((E - f) / resolution)

so forward is up, the ego sits in pixel (size/2, size/2), and ego-right
(east when facing north) runs along increasing columns.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import points_in_polygon, point_segment_distance, polygon_is_simple, wrap_angle

LANE_KINDS = ("left", "right", "center")
SIGN_KINDS = ("speed_limit", "stop", "yield", "traffic_light")
CHANNELS = ("lane", "crosswalk", "sign", "drivable")


class MapFormatError(ValueError):
    """The map file could not be parsed."""


class MapValidationError(ValueError):
    """The map parsed but breaks a geometric invariant."""


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class Lane:
    points: np.ndarray
    kind: str = "center"


@dataclass(frozen=True)
class Sign:
    x: float
    y: float
    kind: str
    value: float = 0.0


@dataclass
class VectorMap:
    lanes: list[Lane] = field(default_factory=list)
    crosswalks: list[np.ndarray] = field(default_factory=list)
    signs: list[Sign] = field(default_factory=list)
    drivable_area: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lanes) + len(self.crosswalks) + len(self.signs) + len(self.drivable_area)

    def validate(self) -> "VectorMap":
        for i, lane in enumerate(self.lanes):
            pts = np.asarray(lane.points, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
                raise MapValidationError(f"lanes[{i}]: polyline needs >= 2 vertices, got {len(pts)}")
            if not np.isfinite(pts).all():
                raise MapValidationError(f"lanes[{i}]: non-finite coordinate")
            if lane.kind not in LANE_KINDS:
                raise MapValidationError(f"lanes[{i}]: unknown lane kind {lane.kind!r}")
        for name in ("crosswalks", "drivable_area"):
            for i, poly in enumerate(getattr(self, name)):
                if not np.isfinite(poly).all():
                    raise MapValidationError(f"{name}[{i}]: non-finite coordinate")
                if not polygon_is_simple(poly):
                    raise MapValidationError(f"{name}[{i}]: polygon is not simple")
        for i, s in enumerate(self.signs):
            if s.kind not in SIGN_KINDS:
                raise MapValidationError(f"signs[{i}]: unknown sign kind {s.kind!r}")
            if not (np.isfinite(s.x) and np.isfinite(s.y)):
                raise MapValidationError(f"signs[{i}]: non-finite position")
        return self

    def to_dict(self) -> dict:
        return {
            "lanes": [{"kind": l.kind, "points": np.asarray(l.points).tolist()} for l in self.lanes],
            "crosswalks": [{"polygon": np.asarray(p).tolist()} for p in self.crosswalks],
            "signs": [{"position": [s.x, s.y], "kind": s.kind, "value": s.value} for s in self.signs],
            "drivable_area": [{"polygon": np.asarray(p).tolist()} for p in self.drivable_area],
        }


def normalize_ring(poly) -> np.ndarray:
    """Drop a repeated closing vertex so rings are stored open."""
    poly = np.asarray(poly, dtype=float)
    if len(poly) > 1 and np.array_equal(poly[0], poly[-1]):
        poly = poly[:-1]
    return poly


def _parse_points(obj, where: str) -> np.ndarray:
    try:
        pts = np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise MapFormatError(f"{where}: coordinates must be numbers ({exc})") from None
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise MapFormatError(f"{where}: expected a list of [x, y] pairs")
    return pts


def map_from_dict(doc: dict) -> VectorMap:
    if not isinstance(doc, dict):
        raise MapFormatError("top level must be an object")
    m = VectorMap()
    try:
        for i, item in enumerate(doc.get("lanes", [])):
            pts = _parse_points(item["points"], f"lanes[{i}].points")
            m.lanes.append(Lane(pts, item.get("kind", "center")))
        for i, item in enumerate(doc.get("crosswalks", [])):
            m.crosswalks.append(normalize_ring(_parse_points(item["polygon"], f"crosswalks[{i}].polygon")))
        for i, item in enumerate(doc.get("signs", [])):
            pos = _parse_points([item["position"]], f"signs[{i}].position")[0]
            m.signs.append(Sign(float(pos[0]), float(pos[1]), item["kind"], float(item.get("value", 0.0))))
        for i, item in enumerate(doc.get("drivable_area", [])):
            m.drivable_area.append(normalize_ring(_parse_points(item["polygon"], f"drivable_area[{i}].polygon")))
    except KeyError as exc:
        raise MapFormatError(f"missing field {exc}") from None
    return m.validate()


def load_map(path) -> VectorMap:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return map_from_dict(doc)


def save_map(vmap: VectorMap, path) -> None:
    Path(path).write_text(json.dumps(vmap.to_dict(), indent=1))


def _polyline_dist(center: np.ndarray, pts: np.ndarray) -> float:
    if len(pts) == 1:
        return float(np.hypot(*(pts[0] - center)))
    return float(point_segment_distance(center, pts[:-1], pts[1:]).min())


def _polygon_dist(center: np.ndarray, poly: np.ndarray) -> float:
    if points_in_polygon(center, poly)[0]:
        return 0.0
    ring = np.vstack([poly, poly[:1]])
    return _polyline_dist(center, ring)


def query_radius(vmap: VectorMap, pose: Pose, r: float) -> VectorMap:
    """Primitives with any part within ``r`` of the pose position.

    Polygons containing the position count as distance zero.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    c = np.array([pose.x, pose.y])
    return VectorMap(
        lanes=[l for l in vmap.lanes if _polyline_dist(c, l.points) <= r],
        crosswalks=[p for p in vmap.crosswalks if _polygon_dist(c, p) <= r],
        signs=[s for s in vmap.signs if np.hypot(s.x - c[0], s.y - c[1]) <= r],
        drivable_area=[p for p in vmap.drivable_area if _polygon_dist(c, p) <= r],
    )


def world_to_ego(points: np.ndarray, pose: Pose) -> np.ndarray:
    """(n,2) world points -> (n,2) ego points (forward, left)."""
    d = np.asarray(points, dtype=float) - np.array([pose.x, pose.y])
    c, s = np.cos(pose.yaw), np.sin(pose.yaw)
    return np.stack([d[..., 0] * c + d[..., 1] * s, -d[..., 0] * s + d[..., 1] * c], axis=-1)


def to_ego(vmap: VectorMap, pose: Pose) -> VectorMap:
    signs = []
    for s in vmap.signs:
        f, l = world_to_ego(np.array([s.x, s.y]), pose)
        signs.append(Sign(float(f), float(l), s.kind, s.value))
    return VectorMap(
        lanes=[Lane(world_to_ego(l.points, pose), l.kind) for l in vmap.lanes],
        crosswalks=[world_to_ego(p, pose) for p in vmap.crosswalks],
        signs=signs,
        drivable_area=[world_to_ego(p, pose) for p in vmap.drivable_area],
    )


@dataclass
class SemanticGrid:
    data: np.ndarray  # (4, size, size) uint8
    resolution: float

    @property
    def size(self) -> int:
        return self.data.shape[1]

    @property
    def extent(self) -> float:
        return self.size * self.resolution

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]


def ego_to_pixel(points: np.ndarray, size: int, resolution: float) -> np.ndarray:
    """Continuous pixel coordinates (u=col, v=row) for ego points."""
    E = size * resolution / 2.0
    pts = np.asarray(points, dtype=float)
    return np.stack([(E - pts[..., 1]) / resolution, (E - pts[..., 0]) / resolution], axis=-1)


def _supercover_raw(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    ts = [np.array([0.0, 1.0])]
    for axis in (0, 1):
        if d[axis] != 0:
            lo, hi = sorted((p0[axis], p1[axis]))
            k = np.arange(np.ceil(lo), np.floor(hi) + 1)
            ts.append((k - p0[axis]) / d[axis])
    t = np.sort(np.clip(np.concatenate(ts), 0.0, 1.0))
    # midpoints between consecutive crossings lie inside exactly one cell
    mids = 0.5 * (t[:-1] + t[1:])
    pts = p0[None, :] + mids[:, None] * d[None, :]
    return np.floor(pts).astype(np.int64)


def supercover_cells(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Integer cells (col, row) whose interior the segment p0->p1 passes through."""
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    if np.array_equal(p0, p1):
        return np.floor(p0)[None, :].astype(np.int64)
    return np.unique(_supercover_raw(p0, p1), axis=0)


def _draw_polyline(img: np.ndarray, uv: np.ndarray) -> None:
    size = img.shape[0]
    for a, b in zip(uv[:-1], uv[1:]):
        # skip segments that cannot touch the window
        if max(a[0], b[0]) < 0 or min(a[0], b[0]) >= size or max(a[1], b[1]) < 0 or min(a[1], b[1]) >= size:
            continue
        cells = _supercover_raw(a, b) if not np.array_equal(a, b) else np.floor(a)[None, :].astype(np.int64)
        ok = (cells[:, 0] >= 0) & (cells[:, 0] < size) & (cells[:, 1] >= 0) & (cells[:, 1] < size)
        cells = cells[ok]
        img[cells[:, 1], cells[:, 0]] = 1


def _fill_polygon(img: np.ndarray, uv: np.ndarray) -> None:
    """Even-odd fill sampled at pixel centers.

    A center is inside when an odd number of edge crossings of its row lie
    strictly to its right. Each crossing at x covers the centers j + 0.5 < x,
    i.e. the first ceil(x - 0.5) columns, accumulated with a difference array.
    """
    size = img.shape[0]
    a = uv
    b = np.roll(uv, -1, axis=0)
    rows = np.arange(size) + 0.5
    vmin, vmax = a[:, 1].min(), a[:, 1].max()
    keep = (rows >= vmin) & (rows <= vmax)
    if not keep.any():
        return
    rows = rows[keep]
    y = rows[:, None]
    straddle = (a[None, :, 1] > y) != (b[None, :, 1] > y)
    ri, ei = np.nonzero(straddle)
    if len(ri) == 0:
        return
    xc = a[ei, 0] + (rows[ri] - a[ei, 1]) * (b[ei, 0] - a[ei, 0]) / (b[ei, 1] - a[ei, 1])
    k = np.clip(np.ceil(xc - 0.5), 0, size).astype(np.int64)
    diff = np.zeros((len(rows), size + 1), dtype=np.int64)
    np.add.at(diff, (ri, np.zeros_like(ri)), 1)
    np.add.at(diff, (ri, k), -1)
    count = np.cumsum(diff[:, :size], axis=1)
    row_idx = (rows - 0.5).astype(np.int64)
    img[row_idx] |= (count % 2 == 1).astype(img.dtype)


def rasterize(ego_map: VectorMap, size: int = 256, resolution: float = 0.1) -> SemanticGrid:
    """Binary 4-channel raster of an ego-frame map crop."""
    if size % 2:
        raise ValueError("grid size must be even")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    data = np.zeros((len(CHANNELS), size, size), dtype=np.uint8)
    for lane in ego_map.lanes:
        _draw_polyline(data[0], ego_to_pixel(lane.points, size, resolution))
    for poly in ego_map.crosswalks:
        _fill_polygon(data[1], ego_to_pixel(poly, size, resolution))
    for s in ego_map.signs:
        u, v = ego_to_pixel(np.array([s.x, s.y]), size, resolution)
        c, r = int(np.floor(u)), int(np.floor(v))
        if 0 <= r < size and 0 <= c < size:
            data[2, r, c] = 1
    for poly in ego_map.drivable_area:
        _fill_polygon(data[3], ego_to_pixel(poly, size, resolution))
    return SemanticGrid(data, resolution)


def map_crop(vmap: VectorMap, pose: Pose, size: int = 256, resolution: float = 0.1) -> SemanticGrid:
    """Query, transform and rasterize in one call."""
    # 25 m query radius, widened if the window's half-diagonal is larger
    radius = max(25.0, size * resolution / np.sqrt(2.0))
    return rasterize(to_ego(query_radius(vmap, pose, radius), pose), size, resolution)
