"""Deterministic driving world used as the data source and test bed.

Kinematic bicycle vehicle, procedurally generated roads, a flat-ground
front camera, a pure-pursuit expert and rectangle collision checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (points_in_polygon, point_segment_distance, polygon_distance, rect_corners,
                       rotation, sat_overlap, wrap_angle)
from .hdmap import Lane, Pose, Sign, VectorMap, world_to_ego

DT = 0.1
V_MAX = 10.0
MAX_STEER = math.radians(30.0)
WHEELBASE = 2.7
TAU = 0.5
EGO_LENGTH = 4.0
EGO_WIDTH = 1.8
HORIZON = 2.0
ROAD_HALF_WIDTH = 3.5
DIFFICULTIES = ("straight", "turn", "ambiguous_intersection")

# camera
FRAME_SIZE = 64
CAM_HEIGHT = 1.5
CAM_OFFSET = 1.0  # metres ahead of the vehicle centre
CAM_RANGE = 12.0
FOCAL = FRAME_SIZE / 2.0  # 90 degree horizontal field of view
SKY = (0.55, 0.75, 0.95)
GROUND = (0.35, 0.55, 0.30)
ROAD = (0.40, 0.40, 0.42)
LINE = (0.95, 0.95, 0.95)
CROSSWALK = (0.85, 0.85, 0.60)
OBSTACLE = (0.80, 0.15, 0.10)
LINE_HALF_WIDTH = 0.2
OBSTACLE_HEIGHT = 1.5


@dataclass(frozen=True)
class Action:
    """steering in [-1, 1] (+1 full right), speed in [0, 1] of V_MAX."""

    steering: float
    speed: float

    def __post_init__(self):
        if math.isfinite(self.steering) and math.isfinite(self.speed):
            object.__setattr__(self, "steering", min(1.0, max(-1.0, float(self.steering))))
            object.__setattr__(self, "speed", min(1.0, max(0.0, float(self.speed))))

    @property
    def finite(self) -> bool:
        return math.isfinite(self.steering) and math.isfinite(self.speed)


@dataclass(frozen=True)
class EgoState:
    pose: Pose
    speed: float = 0.0

    def footprint(self) -> np.ndarray:
        return rect_corners(self.pose.x, self.pose.y, self.pose.yaw, EGO_LENGTH, EGO_WIDTH)


@dataclass(frozen=True)
class Obstacle:
    x: float
    y: float
    yaw: float
    length: float
    width: float
    vx: float = 0.0
    vy: float = 0.0

    def corners(self, t: float = 0.0) -> np.ndarray:
        return rect_corners(self.x + self.vx * t, self.y + self.vy * t, self.yaw, self.length, self.width)

    def center(self, t: float = 0.0) -> np.ndarray:
        return np.array([self.x + self.vx * t, self.y + self.vy * t])

    @property
    def radius(self) -> float:
        return math.hypot(self.length / 2, self.width / 2)


EGO_RADIUS = math.hypot(EGO_LENGTH / 2, EGO_WIDTH / 2)


def curvature(steering: float) -> float:
    return math.tan(-steering * MAX_STEER) / WHEELBASE


def _arc_factors(dpsi):
    """sin(d)/d and (1 - cos d)/d with series near zero."""
    dpsi = np.asarray(dpsi, dtype=float)
    small = np.abs(dpsi) < 1e-4
    d = np.where(small, 1.0, dpsi)
    d2 = dpsi * dpsi
    a = np.where(small, 1.0 - d2 / 6.0 + d2 * d2 / 120.0, np.sin(d) / d)
    b = np.where(small, dpsi / 2.0 - dpsi * d2 / 24.0 + dpsi * d2 * d2 / 720.0, (1.0 - np.cos(d)) / d)
    return a, b


def arc_pose(x, y, yaw, kappa, s):
    """Pose after travelling arc length s at constant curvature (vectorised in s)."""
    dpsi = kappa * np.asarray(s, dtype=float)
    a, b = _arc_factors(dpsi)
    c, sn = math.cos(yaw), math.sin(yaw)
    return x + s * (c * a - sn * b), y + s * (sn * a + c * b), yaw + dpsi


def travel(v0: float, v_target: float, t, tau: float = TAU):
    """Distance and speed after time t under a first-order speed lag."""
    t = np.asarray(t, dtype=float)
    if tau <= 0:
        return v_target * t, np.full_like(t, v_target)
    e = np.exp(-t / tau)
    return v_target * t + (v0 - v_target) * tau * (1.0 - e), v_target + (v0 - v_target) * e


def step_dynamics(state: EgoState, action: Action, dt: float = DT, tau: float = TAU) -> EgoState:
    s, v = travel(state.speed, action.speed * V_MAX, dt, tau)
    x, y, yaw = arc_pose(state.pose.x, state.pose.y, state.pose.yaw, curvature(action.steering), float(s))
    return EgoState(Pose(float(x), float(y), float(yaw)), float(min(max(v, 0.0), V_MAX)))


def rollout(state: EgoState, action: Action, horizon: float = HORIZON, dt: float = DT):
    """Constant-action prediction sampled every dt, including t = 0.

    Returns (times (K,), poses (K, 3)). Closed form of repeated step_dynamics.
    """
    n = int(round(horizon / dt))
    times = dt * np.arange(n + 1)
    s, _ = travel(state.speed, action.speed * V_MAX, times)
    x, y, yaw = arc_pose(state.pose.x, state.pose.y, state.pose.yaw, curvature(action.steering), s)
    return times, np.stack([x, y, yaw], axis=1)


def footprints(poses: np.ndarray) -> np.ndarray:
    """(K, 3) poses -> (K, 4, 2) ego rectangles."""
    hl, hw = EGO_LENGTH / 2, EGO_WIDTH / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (K,2,2)
    return np.einsum("kij,nj->kni", R, local) + poses[:, None, :2]


def check_collision(times: np.ndarray, poses: np.ndarray, obstacles, t0: float = 0.0):
    """Earliest sample at which the ego rectangle touches an obstacle.

    ``times`` are relative to ``t0``; movers are advanced to ``t0 + t``.
    Returns (hit, contact_time or None).
    """
    if not obstacles:
        return False, None
    rects = footprints(poses)
    for k, t in enumerate(times):
        for ob in obstacles:
            c = ob.center(t0 + t)
            if math.hypot(c[0] - poses[k, 0], c[1] - poses[k, 1]) > EGO_RADIUS + ob.radius:
                continue
            if sat_overlap(rects[k], ob.corners(t0 + t)):
                return True, float(t)
    return False, None


def rollout_clearance(times, poses, obstacles, t0: float = 0.0, cap: float = 10.0) -> float:
    """Minimum footprint-to-obstacle distance along a rollout (capped)."""
    best = cap
    if not obstacles:
        return best
    rects = footprints(poses)
    for k, t in enumerate(times):
        for ob in obstacles:
            c = ob.center(t0 + t)
            lower = math.hypot(c[0] - poses[k, 0], c[1] - poses[k, 1]) - EGO_RADIUS - ob.radius
            if lower >= best:
                continue
            best = min(best, polygon_distance(rects[k], ob.corners(t0 + t)))
    return best


class Route:
    """Lane-centre polyline with arc-length parameterisation."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        seg = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.headings = np.arctan2(seg[:, 1], seg[:, 0])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def project(self, p) -> float:
        p = np.asarray(p, dtype=float)
        a, b = self.points[:-1], self.points[1:]
        ab = b - a
        t = np.clip(((p - a) * ab).sum(1) / (self.seg_len ** 2), 0.0, 1.0)
        d = np.hypot(*(a + t[:, None] * ab - p).T)
        i = int(np.argmin(d))
        return float(self.s[i] + t[i] * self.seg_len[i])

    def point_at(self, s: float) -> np.ndarray:
        if s >= self.length:
            extra = s - self.length
            h = self.headings[-1]
            return self.points[-1] + extra * np.array([math.cos(h), math.sin(h)])
        s = max(s, 0.0)
        i = min(int(np.searchsorted(self.s, s, side="right")) - 1, len(self.seg_len) - 1)
        t = (s - self.s[i]) / self.seg_len[i]
        return self.points[i] + t * (self.points[i + 1] - self.points[i])

    def heading_at(self, s: float) -> float:
        """Heading of the segment containing s (the incoming one at a vertex)."""
        i = int(np.searchsorted(self.s, s, side="left")) - 1
        return float(self.headings[min(max(i, 0), len(self.headings) - 1)])

    def turn_ahead(self, s: float, window: float) -> float:
        """Absolute heading change between s and s + window."""
        return abs(wrap_angle(self.heading_at(min(s + window, self.length)) - self.heading_at(max(s, 1e-9))))


@dataclass
class Scenario:
    map: VectorMap
    start: Pose
    route: Route
    waypoints: np.ndarray  # (n, 3) world x, y, heading
    waypoint_s: np.ndarray  # arc length of each waypoint along the route
    obstacles: list[Obstacle] = field(default_factory=list)
    budget_s: float = 30.0
    seed: int = 0
    difficulty: str = "straight"
    variant: str = ""
    goal_distance: float = 0.0  # geodesic start -> final waypoint inside the drivable area

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1, :2]

    def to_dict(self) -> dict:
        d = self.map.to_dict()
        d.update(
            start=[self.start.x, self.start.y, self.start.yaw],
            route=self.route.points.tolist(),
            waypoints=self.waypoints.tolist(),
            waypoint_s=self.waypoint_s.tolist(),
            obstacles=[[o.x, o.y, o.yaw, o.length, o.width, o.vx, o.vy] for o in self.obstacles],
            budget_s=self.budget_s, seed=self.seed, difficulty=self.difficulty,
            variant=self.variant, goal_distance=self.goal_distance,
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        from .hdmap import map_from_dict
        return cls(
            map=map_from_dict(d), start=Pose(*d["start"]), route=Route(d["route"]),
            waypoints=np.asarray(d["waypoints"], dtype=float), waypoint_s=np.asarray(d["waypoint_s"], dtype=float),
            obstacles=[Obstacle(*o) for o in d.get("obstacles", [])], budget_s=float(d["budget_s"]),
            seed=int(d["seed"]), difficulty=d["difficulty"], variant=d.get("variant", ""),
            goal_distance=float(d.get("goal_distance", 0.0)),
        )


def inside_drivable(vmap: VectorMap, p) -> bool:
    p = np.asarray(p, dtype=float)[None, :]
    return any(points_in_polygon(p, poly)[0] for poly in vmap.drivable_area)


# ---------------------------------------------------------------- rendering

def _ground_rays():
    rows = np.arange(FRAME_SIZE // 2, FRAME_SIZE)
    cols = np.arange(FRAME_SIZE)
    dv = rows + 0.5 - FRAME_SIZE / 2
    fwd = FOCAL * CAM_HEIGHT / dv
    du = cols + 0.5 - FRAME_SIZE / 2
    F = np.repeat(fwd[:, None], FRAME_SIZE, axis=1)
    L = -du[None, :] * F / FOCAL
    visible = np.hypot(F, L) <= CAM_RANGE
    return rows, F, L, visible


_ROWS, _F, _L, _VIS = _ground_rays()


def render_front_view(vmap: VectorMap, obstacles, state: EgoState, t: float = 0.0) -> np.ndarray:
    """64x64x3 frame in [0, 1] from a pinhole camera over flat ground."""
    img = np.empty((FRAME_SIZE, FRAME_SIZE, 3))
    img[: FRAME_SIZE // 2] = SKY
    img[FRAME_SIZE // 2:] = GROUND
    c, s = math.cos(state.pose.yaw), math.sin(state.pose.yaw)
    cx = state.pose.x + CAM_OFFSET * c
    cy = state.pose.y + CAM_OFFSET * s
    F, L = _F[_VIS], _L[_VIS]
    world = np.stack([cx + F * c - L * s, cy + F * s + L * c], axis=1)
    colors = np.tile(np.array(GROUND), (len(world), 1))
    road = np.zeros(len(world), dtype=bool)
    for poly in vmap.drivable_area:
        road |= points_in_polygon(world, poly)
    colors[road] = ROAD
    for poly in vmap.crosswalks:
        colors[points_in_polygon(world, poly)] = CROSSWALK
    cam = np.array([[cx, cy]])
    for lane in vmap.lanes:
        if lane.kind == "center":
            continue  # only painted boundaries are visible
        a, b = lane.points[:-1], lane.points[1:]
        near = point_segment_distance(cam, a, b)[0] <= CAM_RANGE + LINE_HALF_WIDTH
        if not near.any():
            continue
        d = point_segment_distance(world, a[near], b[near]).min(axis=1)
        colors[d <= LINE_HALF_WIDTH] = LINE
    ground = img[FRAME_SIZE // 2:]
    ground[_VIS] = colors

    boxes = []
    for ob in obstacles:
        pts = world_to_ego(ob.corners(t), Pose(cx, cy, state.pose.yaw))  # camera frame
        if pts[:, 0].min() <= 0.5 or np.hypot(pts[:, 0], pts[:, 1]).min() > CAM_RANGE:
            continue
        u = FRAME_SIZE / 2 - FOCAL * pts[:, 1] / pts[:, 0]
        v_bottom = FRAME_SIZE / 2 + FOCAL * CAM_HEIGHT / pts[:, 0]
        v_top = FRAME_SIZE / 2 + FOCAL * (CAM_HEIGHT - OBSTACLE_HEIGHT) / pts[:, 0]
        boxes.append((pts[:, 0].min(), u.min(), u.max(), min(v_top.min(), v_bottom.min()),
                      max(v_top.max(), v_bottom.max())))
    for _, u0, u1, v0, v1 in sorted(boxes, key=lambda b: -b[0]):  # painter's order: far first
        c0, c1 = max(int(math.floor(u0)), 0), min(int(math.ceil(u1)), FRAME_SIZE)
        r0, r1 = max(int(math.floor(v0)), 0), min(int(math.ceil(v1)), FRAME_SIZE)
        if c0 < c1 and r0 < r1:
            img[r0:r1, c0:c1] = OBSTACLE
    return img


# ---------------------------------------------------------------- expert

A_LAT = 2.5
NOMINAL_SPEED = 0.7
STOP_SPEED = 0.2  # creep through a stop-controlled junction
STOP_ZONE = 10.0


def expert_policy(state: EgoState, scenario: Scenario, t: float = 0.0) -> Action:
    """Pure pursuit on the route centreline with clearance-based braking and a creep at stop signs."""
    route = scenario.route
    p = np.array([state.pose.x, state.pose.y])
    s = route.project(p)
    lookahead = max(3.0, 1.0 * state.speed)
    target = route.point_at(s + lookahead)
    f, l = world_to_ego(target, state.pose)
    kappa = 2.0 * l / max(f * f + l * l, 1e-6)
    steering = float(np.clip(-math.atan(kappa * WHEELBASE) / MAX_STEER, -1.0, 1.0))

    window = 12.0
    k_est = route.turn_ahead(s, window) / window
    speed = NOMINAL_SPEED if k_est < 1e-6 else min(NOMINAL_SPEED, math.sqrt(A_LAT / k_est) / V_MAX)
    for sign in scenario.map.signs:
        if sign.kind == "stop":
            d = route.project([sign.x, sign.y]) - s
            if -4.0 < d < STOP_ZONE:
                speed = min(speed, STOP_SPEED + (NOMINAL_SPEED - STOP_SPEED) * max(d, 0.0) / STOP_ZONE)
    if scenario.obstacles:
        times, poses = rollout(state, Action(steering, speed))
        clearance = rollout_clearance(times, poses, scenario.obstacles, t0=t)
        speed *= float(np.clip(clearance - 2.0, 0.0, 1.0))  # full at >= 3 m, zero at <= 2 m
    return Action(steering, speed)


# ---------------------------------------------------------------- episodes

class Drive:
    """Episode state machine shared by the benchmark and demo collection."""

    def __init__(self, scenario: Scenario, arrival_radius: float = 2.0):
        self.scenario = scenario
        self.arrival_radius = arrival_radius
        self.state = EgoState(scenario.start, 0.0)
        self.t = 0.0
        self.steps = 0
        self.path_length = 0.0
        self.progress = scenario.route.project([scenario.start.x, scenario.start.y])
        self.collided = False
        self.infraction = False
        self.arrived = False
        self.timeout = False
        self.failed = ""

    @property
    def done(self) -> bool:
        return self.collided or self.infraction or self.arrived or self.timeout or bool(self.failed)

    def next_waypoint_index(self) -> int:
        ahead = np.nonzero(self.scenario.waypoint_s > self.progress + 1e-9)[0]
        return int(ahead[0]) if len(ahead) else len(self.scenario.waypoint_s) - 1

    def relative_waypoint(self):
        from .encode import Waypoint
        wx, wy, wh = self.scenario.waypoints[self.next_waypoint_index()]
        f, l = world_to_ego(np.array([wx, wy]), self.state.pose)
        return Waypoint(east=float(-l), north=float(f),
                        yaw=math.degrees(wrap_angle(wh - self.state.pose.yaw)))

    def step(self, action: Action) -> None:
        if self.done:
            return
        if not action.finite:
            self.failed = "non-finite action"
            return
        before = self.state
        self.state = step_dynamics(self.state, action)
        self.path_length += float(travel(before.speed, action.speed * V_MAX, DT)[0])
        self.t = round(self.t + DT, 10)
        self.steps += 1
        pos = np.array([self.state.pose.x, self.state.pose.y])
        self.progress = self.scenario.route.project(pos)
        hit, _ = check_collision(np.array([0.0]), np.array([[self.state.pose.x, self.state.pose.y,
                                                             self.state.pose.yaw]]),
                                 self.scenario.obstacles, t0=self.t)
        if hit:
            self.collided = True
        elif not inside_drivable(self.scenario.map, pos):
            self.infraction = True
        elif np.hypot(*(pos - self.scenario.goal)) <= self.arrival_radius:
            self.arrived = True
        elif self.t >= self.scenario.budget_s - 1e-9:
            self.timeout = True


# ---------------------------------------------------------------- generation

def _centerline(moves, step_deg: float = 10.0) -> np.ndarray:
    """Polyline from ('S', length) and ('L'|'R', radius, degrees) moves, starting at the origin heading +x."""
    pts = [np.zeros(2)]
    h = 0.0
    for mv in moves:
        if mv[0] == "S":
            pts.append(pts[-1] + mv[1] * np.array([math.cos(h), math.sin(h)]))
        else:
            sign = 1.0 if mv[0] == "L" else -1.0
            radius, deg = mv[1], mv[2]
            n = max(2, int(math.ceil(deg / step_deg)))
            center = pts[-1] + radius * np.array([-math.sin(h), math.cos(h)]) * sign
            start_ang = h - sign * math.pi / 2
            for k in range(1, n + 1):
                a = start_ang + sign * math.radians(deg) * k / n
                pts.append(center + radius * np.array([math.cos(a), math.sin(a)]))
            h += sign * math.radians(deg)
    return np.array(pts)


def _offset(line: np.ndarray, d: float) -> np.ndarray:
    """Offset a polyline to its left by d using mitred vertex normals."""
    seg = np.diff(line, axis=0)
    seg /= np.hypot(seg[:, 0], seg[:, 1])[:, None]
    nrm = np.stack([-seg[:, 1], seg[:, 0]], axis=1)
    vn = np.empty_like(line)
    vn[0], vn[-1] = nrm[0], nrm[-1]
    mid = nrm[:-1] + nrm[1:]
    mid /= np.hypot(mid[:, 0], mid[:, 1])[:, None]
    cosang = (mid * nrm[1:]).sum(1)
    vn[1:-1] = mid / cosang[:, None]
    return line + d * vn


def _transform(points, R, t):
    return np.asarray(points) @ R.T + t


def _road_map(center: np.ndarray, hw: float) -> VectorMap:
    left, right = _offset(center, hw), _offset(center, -hw)
    return VectorMap(
        lanes=[Lane(left, "left"), Lane(right, "right"), Lane(center, "center")],
        drivable_area=[np.vstack([left, right[::-1]])],
    )


def _resample_waypoints(route: Route, spacing: float = 10.0, start_s: float = 0.0):
    ss = list(np.arange(start_s + spacing, route.length - 1e-6, spacing))
    if not ss or route.length - ss[-1] > 1e-6:
        ss.append(route.length)
    ss = np.array(ss)
    pts = np.array([route.point_at(s) for s in ss])
    hdg = np.array([route.heading_at(s) for s in ss])
    return np.column_stack([pts, hdg]), ss


def geodesic_distance(polygons, a, b) -> float:
    """Shortest path length from a to b inside the union of polygons."""
    import networkx as nx
    from shapely.geometry import LineString, Point, Polygon
    from shapely.ops import unary_union
    from shapely.prepared import prep

    region = unary_union([Polygon(p) for p in polygons]).buffer(1e-6)
    if region.geom_type != "Polygon":
        region = max(region.geoms, key=lambda g: g.area)
    pr = prep(region)
    nodes = [tuple(a), tuple(b)] + [tuple(c) for c in np.asarray(region.exterior.coords)[:-1]]
    for ring in region.interiors:
        nodes += [tuple(c) for c in np.asarray(ring.coords)[:-1]]
    if not (pr.covers(Point(a)) and pr.covers(Point(b))):
        raise ValueError("endpoints must lie inside the region")
    g = nx.Graph()
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            if pr.covers(LineString([nodes[i], nodes[j]])):
                g.add_edge(i, j, weight=math.dist(nodes[i], nodes[j]))
    return float(nx.dijkstra_path_length(g, 0, 1))


def _place_obstacles(rng, route: Route, vmap: VectorMap, hw: float, gap_range, budget, movers: bool):
    from shapely.geometry import Polygon
    from shapely.ops import unary_union

    road = unary_union([Polygon(p) for p in vmap.drivable_area])
    obstacles = []
    for _ in range(int(rng.integers(0, 4))):
        for _attempt in range(10):
            s = rng.uniform(8.0, route.length - 4.0)
            side = rng.choice([-1.0, 1.0])
            car = rng.random() < 0.7
            length, width = (4.2, 1.9) if car else (0.6, 0.6)
            gap = rng.uniform(*gap_range)
            p = route.point_at(s)
            h = route.heading_at(s)
            off = side * (hw + gap + width / 2)
            c = p + off * np.array([-math.sin(h), math.cos(h)])
            ob = Obstacle(float(c[0]), float(c[1]), h, length, width)
            if Polygon(ob.corners()).distance(road) >= gap_range[0] * 0.9:
                obstacles.append(ob)
                break
    if movers and rng.random() < 0.4:
        s = rng.uniform(10.0, route.length - 10.0)
        side = rng.choice([-1.0, 1.0])
        h = route.heading_at(s)
        p = route.point_at(s) + side * (hw + rng.uniform(2.0, 4.0)) * np.array([-math.sin(h), math.cos(h)])
        sp = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        ob = Obstacle(float(p[0]), float(p[1]), h, 0.6, 0.6, sp * math.cos(h), sp * math.sin(h))
        if all(Polygon(ob.corners(t)).distance(road) >= 1.0 for t in np.linspace(0, budget, 9)):
            obstacles.append(ob)
    return obstacles


TURN_RADIUS = 7.0


def _build_ambiguous(sigma: float):
    """T junction seen from the south; the arm on side ``sigma`` continues, the other dead-ends.

    The arms only differ beyond |x| = 9.5 m, which the range-limited camera
    never sees from the approach road.
    """
    hw = ROAD_HALF_WIDTH
    x_cont, x_dead = sigma * 34.0, -sigma * 9.5
    xw, xe = min(x_cont, x_dead), max(x_cont, x_dead)
    lanes = [
        Lane(np.array([[-hw, -36.0], [-hw, -hw], [xw, -hw]]), "left"),
        Lane(np.array([[hw, -36.0], [hw, -hw], [xe, -hw]]), "right"),
        Lane(np.array([[xw, hw], [xe, hw]]), "left"),
        Lane(np.array([[xw, -hw], [xw, hw]]), "right"),
        Lane(np.array([[xe, -hw], [xe, hw]]), "right"),
        Lane(np.array([[0.0, -36.0], [0.0, 0.0]]), "center"),
        Lane(np.array([[xw, 0.0], [xe, 0.0]]), "center"),
    ]
    drivable = [
        np.array([[-hw, -36.0], [hw, -36.0], [hw, hw], [-hw, hw]]),
        np.array([[xw, -hw], [xe, -hw], [xe, hw], [xw, hw]]),
    ]
    crosswalks = [np.array([[-hw, -7.0], [hw, -7.0], [hw, -5.0], [-hw, -5.0]])]
    signs = [Sign(hw + 1.0, -8.0, "stop"), Sign(hw + 1.0, -25.0, "speed_limit", 30.0),
             Sign(sigma * 22.0, -hw - 1.0, "speed_limit", 30.0)]
    # the route rounds the corner on an arc so the turn stays within the steering limit
    phi = np.linspace(0.0, math.pi / 2, 10)
    arc = np.column_stack([sigma * TURN_RADIUS * (1 - np.cos(phi)), TURN_RADIUS * (np.sin(phi) - 1)])
    route = np.vstack([[[0.0, -32.0]], arc, [[sigma * 28.0, 0.0]]])
    return VectorMap(lanes, crosswalks, signs, drivable), route


def _signs_along(route: Route, hw: float, spacing: float = 25.0):
    signs = []
    for s in np.arange(5.0, route.length, spacing):
        p = route.point_at(s)
        h = route.heading_at(s)
        q = p - (hw + 1.0) * np.array([-math.sin(h), math.cos(h)])
        signs.append(Sign(float(q[0]), float(q[1]), "speed_limit", 30.0))
    return signs


def generate_scenario(seed: int, difficulty: str = "straight", *, road_half_width: float | None = None,
                      obstacle_gap: tuple[float, float] | None = None, max_tries: int = 20) -> Scenario:
    """Seeded scenario, rejection-sampled until the expert completes it.

    For ``ambiguous_intersection`` seeds 2k and 2k+1 form a mirrored pair
    with identical geometry except which arm connects to the goal.
    """
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng([seed, DIFFICULTIES.index(difficulty)])
    if difficulty == "ambiguous_intersection":
        rng = np.random.default_rng([seed // 2, 7])
    for _ in range(max_tries):
        sc = _generate_once(rng, seed, difficulty, road_half_width, obstacle_gap)
        if _expert_completes(sc):
            return sc
    raise RuntimeError(f"could not generate an expert-feasible {difficulty} scenario for seed {seed}")


def _generate_once(rng, seed, difficulty, road_half_width, obstacle_gap) -> Scenario:
    hw = road_half_width or ROAD_HALF_WIDTH
    gap_range = obstacle_gap or (1.5, 3.0)
    variant = ""
    if difficulty == "ambiguous_intersection":
        variant = "right" if seed % 2 else "left"
        vmap, route_pts = _build_ambiguous(1.0 if variant == "right" else -1.0)
        start_local = (0.0, -32.0, math.pi / 2)
    else:
        if difficulty == "straight":
            moves = [("S", float(rng.uniform(55.0, 75.0)))]
        else:
            variant = "left" if rng.random() < 0.5 else "right"
            moves = [("S", float(rng.uniform(18.0, 28.0))),
                     (variant[0].upper(), float(rng.uniform(12.0, 18.0)), 90.0),
                     ("S", float(rng.uniform(18.0, 28.0)))]
        center = _centerline(moves)
        vmap = _road_map(center, hw)
        route_pts = center
        start_local = (2.0, 0.0, 0.0)
    # random rigid placement in the world
    theta = float(rng.uniform(-math.pi, math.pi))
    R = rotation(theta)
    t = rng.uniform(-200.0, 200.0, size=2)
    vmap = VectorMap(
        lanes=[Lane(_transform(l.points, R, t), l.kind) for l in vmap.lanes],
        crosswalks=[_transform(p, R, t) for p in vmap.crosswalks],
        signs=[Sign(*_transform([s.x, s.y], R, t), s.kind, s.value) for s in vmap.signs],
        drivable_area=[_transform(p, R, t) for p in vmap.drivable_area],
    )
    route = Route(_transform(route_pts, R, t))
    sp = _transform([start_local[0], start_local[1]], R, t)
    start = Pose(float(sp[0]), float(sp[1]), start_local[2] + theta)
    s0 = route.project(sp)
    waypoints, ws = _resample_waypoints(route, 10.0, start_s=s0 - (s0 % 10.0) if s0 > 0 else 0.0)
    if difficulty == "ambiguous_intersection":
        waypoints, ws = _ambiguous_waypoints(route, t)
    else:
        vmap.signs.extend(_signs_along(route, hw))
    budget = route.length / 3.0 + 8.0
    obstacles = []
    if difficulty != "ambiguous_intersection":
        obstacles = _place_obstacles(rng, route, vmap, hw, gap_range, budget, movers=difficulty == "straight")
    vmap.validate()
    goal_distance = geodesic_distance(vmap.drivable_area, sp, waypoints[-1, :2])
    return Scenario(vmap, start, route, waypoints, ws, obstacles, budget, seed, difficulty, variant, goal_distance)


def _ambiguous_waypoints(route: Route, centre):
    """Approach waypoints, then the junction centre (same for both branches), then the chosen arm.

    The centre waypoint is handed over where the route passes closest to it,
    midway round the corner, so the goal only reveals the branch once the
    turn is under way.
    """
    corner_s = route.s[1]
    approach = [s for s in np.arange(corner_s - 20.0, corner_s, 10.0) if s > 0]
    centre_s = route.project(centre)
    arm = list(np.arange(centre_s + 10.0, route.length, 10.0)) + [route.length]
    pts = [route.point_at(s) for s in approach] + [np.asarray(centre, dtype=float)] + [route.point_at(s) for s in arm]
    hdg = [route.heading_at(s) for s in approach] + [route.heading_at(corner_s - 1.0)] + [route.heading_at(s) for s in arm]
    return np.column_stack([np.array(pts), hdg]), np.array(approach + [centre_s] + arm)


def _expert_completes(sc: Scenario) -> bool:
    drive = Drive(sc)
    while not drive.done:
        drive.step(expert_policy(drive.state, sc, drive.t))
    return drive.arrived
