"""Behaviour cloning: demonstrations, the composite loss and the trainer."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Config
from .geometry import point_segment_distance, sat_overlap
from .hdmap import Pose, map_crop
from .numerics import Params, Tensor
from .policy import forward
from .sim import (EGO_RADIUS, MAX_STEER, TAU, V_MAX, WHEELBASE, Action, Drive, EgoState, Scenario,
                  check_collision, curvature, expert_policy, footprints, render_front_view, rollout)

W_SMOOTH = 0.1
W_COLL = 0.05
D_SAFE = 1.0


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


# ---------------------------------------------------------------- demonstrations

@dataclass
class Demonstration:
    scenario: Scenario
    frames: np.ndarray  # (T, H, W, 3) uint8
    states: np.ndarray  # (T, 4) x, y, yaw, speed
    times: np.ndarray  # (T,)
    waypoints: np.ndarray  # (T, 3) east m, north m, yaw rad
    actions: np.ndarray  # (T, 2) expert steering, speed
    seed: int = 0
    _grids: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.actions) < 2:
            raise ValueError("a demonstration needs at least two steps")
        if np.any(np.abs(self.actions[:, 0]) > 1) or np.any((self.actions[:, 1] < 0) | (self.actions[:, 1] > 1)):
            raise ValueError("expert actions out of range")

    def __len__(self) -> int:
        return len(self.actions)

    def pose(self, i: int) -> Pose:
        return Pose(*self.states[i, :3])

    def grids(self, size: int, resolution: float, index=None) -> np.ndarray:
        """(n, 4, S, S) uint8 rasters, built once per (size, resolution) and kept bit-packed."""
        key = (size, float(resolution))
        if key not in self._grids:
            packed = [np.packbits(map_crop(self.scenario.map, self.pose(i), size, resolution).data)
                      for i in range(len(self))]
            self._grids[key] = np.stack(packed)
        packed = self._grids[key] if index is None else self._grids[key][index]
        n = packed.shape[0]
        return np.unpackbits(packed, axis=1, count=4 * size * size).reshape(n, 4, size, size)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def collect_demo(scenario: Scenario, noise: float = 0.15, seed: int = 0, tries: int = 4) -> Demonstration:
    """Expert rollout with executed-action noise; labels are always the clean expert action.

    If the noisy rollout fails, the noise is halved and the rollout retried,
    ending with a clean rollout.
    """
    for attempt in range(tries):
        sigma = noise * 0.5 ** attempt if attempt < tries - 1 else 0.0
        rng = np.random.default_rng([seed, attempt])
        drive = Drive(scenario)
        frames, states, times, wps, acts = [], [], [], [], []
        while not drive.done:
            st = drive.state
            frames.append(_to_uint8(render_front_view(scenario.map, scenario.obstacles, st, drive.t)))
            states.append([st.pose.x, st.pose.y, st.pose.yaw, st.speed])
            times.append(drive.t)
            wps.append(drive.relative_waypoint().as_array())
            label = expert_policy(st, scenario, drive.t)
            acts.append([label.steering, label.speed])
            executed = Action(label.steering + sigma * rng.standard_normal(),
                              label.speed + 0.3 * sigma * rng.standard_normal())
            drive.step(executed)
        if drive.arrived and len(acts) >= 2:
            return Demonstration(scenario, np.stack(frames), np.array(states), np.array(times),
                                 np.array(wps), np.array(acts), seed)
    raise RuntimeError(f"expert could not complete scenario seed {scenario.seed}")


DEMO_VERSION = 1


def save_demos(demos: list[Demonstration], path, size: int = 256, resolution: float = 0.1) -> None:
    """One npz container: a JSON index header plus per-step arrays concatenated over demos.

    Per-step arrays: frames (uint8), grids (bit-packed uint8 rows, unpack to
    4 x size x size), states, times, waypoints, actions. ``header.demos[i]``
    holds the row range [start, stop) and the scenario of demo i.
    """
    header = {"version": DEMO_VERSION, "grid_size": size, "resolution": resolution, "demos": []}
    start = 0
    for d in demos:
        header["demos"].append({"start": start, "stop": start + len(d), "seed": d.seed,
                                "scenario": d.scenario.to_dict()})
        start += len(d)
    grids = np.concatenate([np.packbits(d.grids(size, resolution).reshape(len(d), -1), axis=1) for d in demos])
    cat = lambda name: np.concatenate([getattr(d, name) for d in demos])  # noqa: E731
    with open(path, "wb") as fh:
        np.savez_compressed(fh, header=np.array(json.dumps(_jsonable(header))), frames=cat("frames"), grids=grids,
                            states=cat("states"), times=cat("times"), waypoints=cat("waypoints"),
                            actions=cat("actions"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_demos(path) -> list[Demonstration]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != DEMO_VERSION:
            raise ValueError(f"unsupported demo dump version {header.get('version')}")
        arrays = {k: z[k] for k in ("frames", "grids", "states", "times", "waypoints", "actions")}
    key = (header["grid_size"], float(header["resolution"]))
    out = []
    for meta in header["demos"]:
        sl = slice(meta["start"], meta["stop"])
        d = Demonstration(Scenario.from_dict(meta["scenario"]), arrays["frames"][sl], arrays["states"][sl],
                          arrays["times"][sl], arrays["waypoints"][sl], arrays["actions"][sl], meta["seed"])
        d._grids[key] = arrays["grids"][sl]
        out.append(d)
    return out


# ---------------------------------------------------------------- losses

def action_loss(pred: Tensor, expert) -> Tensor:
    """Mean over steps of the squared (steering, speed) error."""
    expert = np.asarray(expert, dtype=float).reshape(-1, 2)
    if pred.shape != expert.shape:
        raise nx.ShapeError(f"prediction {pred.shape} and expert {expert.shape} differ in length")
    diff = nx.sub(pred, Tensor(expert))
    return nx.scale(nx.sum_all(nx.square(diff)), 1.0 / pred.rows)


def _pairs(lens):
    """Index pairs (i, i+1) of consecutive steps that stay inside one window."""
    first = []
    off = 0
    for n in lens:
        first.extend(range(off, off + n - 1))
        off += n
    first = np.array(first, dtype=np.intp)
    return first, first + 1


def smoothness_loss(pred: Tensor, lens=None) -> Tensor:
    """Mean squared change between consecutive steps; ``lens`` splits the rows into windows."""
    if pred.rows < 2:
        raise ValueError("smoothness needs at least two steps")
    a, b = _pairs([pred.rows] if lens is None else lens)
    if len(a) == 0:
        return Tensor(np.zeros((1, 1)))
    diff = nx.sub(nx.take_rows(pred, b), nx.take_rows(pred, a))
    return nx.scale(nx.sum_all(nx.square(diff)), 1.0 / len(a))


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _pose_jacobian(state: EgoState, action: Action, times: np.ndarray, poses: np.ndarray, k: int) -> np.ndarray:
    """d(x, y, yaw)_k / d(steering, speed) for the closed-form rollout, (3, 2)."""
    t = times[k]
    kappa = curvature(action.steering)
    dk = -MAX_STEER / (WHEELBASE * math.cos(action.steering * MAX_STEER) ** 2)
    e = math.exp(-t / TAU)
    s = action.speed * V_MAX * t + (state.speed - action.speed * V_MAX) * TAU * (1.0 - e)
    ds = V_MAX * (t - TAU * (1.0 - e))
    yaw = poses[k, 2]
    # d/d kappa of the arc endpoint: integrals of u*sin and u*cos over [0, s]
    u = 0.5 * s * (_GL_X + 1.0)
    w = 0.5 * s * _GL_W
    ang = state.pose.yaw + kappa * u
    dx_dk = -np.sum(w * u * np.sin(ang))
    dy_dk = np.sum(w * u * np.cos(ang))
    J = np.zeros((3, 2))
    J[:, 0] = np.array([dx_dk, dy_dk, s]) * dk
    J[:, 1] = np.array([math.cos(yaw), math.sin(yaw), kappa]) * ds
    return J


def _closest_pair(A: np.ndarray, B: np.ndarray):
    """Distance and closest points (on A, on B) of two disjoint convex polygons."""
    A2, B2 = np.roll(A, -1, axis=0), np.roll(B, -1, axis=0)
    dab = point_segment_distance(A, B, B2)  # A vertices to B edges
    dba = point_segment_distance(B, A, A2)  # B vertices to A edges
    if dab.min() <= dba.min():
        i, j = np.unravel_index(np.argmin(dab), dab.shape)
        p = A[i]
        q = _project(p, B[j], B2[j])
    else:
        i, j = np.unravel_index(np.argmin(dba), dba.shape)
        q = B[i]
        p = _project(q, A[j], A2[j])
    return float(np.hypot(*(p - q))), p, q


def _project(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return a + t * ab


def soft_clearance(state: EgoState, action: Action, obstacles, t0: float = 0.0, d_safe: float = D_SAFE):
    """Min footprint clearance along the 2 s rollout and its gradient w.r.t. (steering, speed).

    Obstacles that cannot come within d_safe are skipped, so the returned
    distance is capped at d_safe.
    """
    times, poses = rollout(state, action)
    best, arg = d_safe, None
    rects = None
    for ob in obstacles:
        centers = np.array([ob.center(t0 + t) for t in times])
        lower = np.hypot(*(centers - poses[:, :2]).T) - EGO_RADIUS - ob.radius
        for k in np.nonzero(lower < best)[0]:
            if rects is None:
                rects = footprints(poses)
            B = ob.corners(t0 + times[k])
            if sat_overlap(rects[k], B):
                return 0.0, np.zeros(2)
            d, p, q = _closest_pair(rects[k], B)
            if d < best:
                best, arg = d, (k, p, q)
    if arg is None:
        return best, np.zeros(2)
    k, p, q = arg
    n = (p - q) / best
    r = p - poses[k, :2]
    dd_dpose = np.array([n[0], n[1], n[0] * -r[1] + n[1] * r[0]])
    return best, dd_dpose @ _pose_jacobian(state, action, times, poses, k)


def collision_penalty(pred: Tensor, states, obstacle_sets, times=None, mode: str = "soft",
                      d_safe: float = D_SAFE) -> Tensor:
    """Mean per-step collision cost of the predicted actions.

    fixed: 1 if the 2 s constant-action rollout touches an obstacle, else 0
    (no gradient). soft: max(0, 1 - d_min / d_safe).
    """
    states = np.asarray(states, dtype=float).reshape(-1, 4)
    n = pred.rows
    times = np.zeros(n) if times is None else np.asarray(times, dtype=float)
    vals = np.zeros(n)
    grads = np.zeros((n, 2))
    for i in range(n):
        obs = obstacle_sets[i]
        if not obs:
            continue
        st = EgoState(Pose(*states[i, :3]), float(states[i, 3]))
        act = Action(float(pred.data[i, 0]), float(pred.data[i, 1]))
        if mode == "fixed":
            tt, poses = rollout(st, act)
            vals[i] = 1.0 if check_collision(tt, poses, obs, t0=times[i])[0] else 0.0
        elif mode == "soft":
            d, g = soft_clearance(st, act, obs, times[i], d_safe)
            if d < d_safe:
                vals[i] = 1.0 - d / d_safe
                grads[i] = -g / d_safe
        else:
            raise ValueError(f"unknown collision mode {mode!r}")
    out = np.array([[vals.mean()]])
    if mode == "fixed":
        return Tensor(out)

    def bw(g):
        return [g[0, 0] * grads / n]

    return nx.custom_op(out, [pred], bw, op="collision_soft")


@dataclass
class LossBreakdown:
    action: float
    smooth: float
    coll: float
    total: float
    w_smooth: float = W_SMOOTH
    w_coll: float = W_COLL
    coll_fixed: float = 0.0

    def check(self, tol: float = 1e-9) -> bool:
        return abs(self.total - (self.action + self.w_smooth * self.smooth + self.w_coll * self.coll)) <= tol


def total_loss(pred: Tensor, expert, lens=None, states=None, obstacle_sets=None, times=None,
               cfg: Config | None = None):
    """action + 0.1 smooth + 0.05 coll; returns (loss tensor, LossBreakdown).

    Config flags drop the smoothness or collision term; without obstacle
    information the collision term is zero.
    """
    use_smooth = cfg.use_smooth if cfg else True
    use_collision = cfg.use_collision if cfg else True
    mode = cfg.collision_mode if cfg else "soft"
    la = action_loss(pred, expert)
    ls = smoothness_loss(pred, lens) if pred.rows >= 2 else Tensor(np.zeros((1, 1)))
    lc, fixed = Tensor(np.zeros((1, 1))), 0.0
    if obstacle_sets is not None and states is not None:
        lc = collision_penalty(pred, states, obstacle_sets, times, mode)
        fixed = lc.item() if mode == "fixed" else collision_penalty(
            Tensor(pred.data), states, obstacle_sets, times, "fixed").item()
    loss = la
    if use_smooth:
        loss = nx.add(loss, nx.scale(ls, W_SMOOTH))
    if use_collision:
        loss = nx.add(loss, nx.scale(lc, W_COLL))
    bd = LossBreakdown(la.item(), ls.item(), lc.item(), loss.item(), W_SMOOTH if use_smooth else 0.0,
                       W_COLL if use_collision else 0.0, fixed)
    return loss, bd


# ---------------------------------------------------------------- optimiser and trainer

class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 1.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, betas[0], betas[1], eps, clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        grads = [p.grad_or_zero() for p in self.params]
        if self.clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: Params
    curve: list[LossBreakdown]
    steps: int


def select_demos(demos: list, fraction: float, seed: int) -> list:
    if fraction >= 1.0:
        return list(demos)
    k = max(1, int(round(fraction * len(demos))))
    idx = np.sort(np.random.default_rng([seed, 17]).choice(len(demos), size=k, replace=False))
    return [demos[i] for i in idx]


def make_windows(demos: list[Demonstration], window: int) -> list[tuple[int, int]]:
    """Non-overlapping (demo, start) windows; a short tail becomes its own shorter window."""
    out = []
    for di, d in enumerate(demos):
        for s in range(0, len(d) - 1, window):
            out.append((di, s))
    return out


def gather(demos, windows, cfg: Config):
    """Stack a list of windows into model inputs and loss targets."""
    frames, grids, wps, acts, states, times, obs, lens = [], [], [], [], [], [], [], []
    for di, s in windows:
        d = demos[di]
        sl = slice(s, min(s + cfg.window, len(d)))
        n = sl.stop - sl.start
        frames.append(d.frames[sl])
        if cfg.use_map:
            grids.append(d.grids(cfg.grid_size, cfg.map_resolution, sl))
        wps.append(d.waypoints[sl])
        acts.append(d.actions[sl])
        states.append(d.states[sl])
        times.append(d.times[sl])
        obs.extend([d.scenario.obstacles] * n)
        lens.append(n)
    grids = np.concatenate(grids) if grids else None
    return (np.concatenate(frames), grids, np.concatenate(wps), np.concatenate(acts), np.concatenate(states),
            np.concatenate(times), obs, lens)


def batch_loss(params: Params, cfg: Config, demos, windows):
    frames, grids, wps, acts, states, times, obs, lens = gather(demos, windows, cfg)
    pred, _ = forward(params, cfg, frames, grids, wps)
    loss, bd = total_loss(pred, acts, lens, states, obs, times, cfg)
    return loss, bd, len(acts)


def _mean_breakdown(items: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    n = sum(w for _, w in items)
    avg = lambda f: sum(getattr(b, f) * w for b, w in items) / n  # noqa: E731
    first = items[0][0]
    return LossBreakdown(avg("action"), avg("smooth"), avg("coll"), avg("total"), first.w_smooth, first.w_coll,
                         avg("coll_fixed"))


def train(params: Params, cfg: Config, demos: list[Demonstration], epochs: int | None = None,
          max_steps: int | None = None, log=None) -> TrainResult:
    """Adam over the trainable parameters with seeded window shuffling.

    Returns the per-epoch mean LossBreakdown. A non-finite loss restores the
    last finite parameters and raises TrainingDiverged.
    """
    if not demos:
        raise ValueError("training needs at least one demonstration")
    epochs = cfg.epochs if epochs is None else epochs
    demos = select_demos(demos, cfg.data_fraction, cfg.seed)
    windows = make_windows(demos, cfg.window)
    opt = Adam(params.trainable(), lr=cfg.lr)
    curve: list[LossBreakdown] = []
    steps = 0
    last_good = params.snapshot()
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(windows))
        items = []
        for lo in range(0, len(order), cfg.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            batch = [windows[i] for i in order[lo:lo + cfg.batch_size]]
            params.zero_grad()
            with nx.Tape() as tape:
                loss, bd, n = batch_loss(params, cfg, demos, batch)
                if not math.isfinite(bd.total):
                    params.restore(last_good)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}",
                                           TrainResult(params, curve, steps))
                tape.backward(loss)
            opt.step()
            if not all(np.isfinite(p.data).all() for p in opt.params):
                params.restore(last_good)
                raise TrainingDiverged(f"non-finite parameters at step {steps}", TrainResult(params, curve, steps))
            last_good = params.snapshot()
            items.append((bd, n))
            steps += 1
        if items:
            curve.append(_mean_breakdown(items))
            if log is not None:
                log(epoch, curve[-1])
        if max_steps is not None and steps >= max_steps:
            break
    params.zero_grad()
    return TrainResult(params, curve, steps)


def evaluate_loss(params: Params, cfg: Config, demos, windows=None) -> LossBreakdown:
    """Loss of the whole window set in one batch (no parameter update)."""
    windows = make_windows(demos, cfg.window) if windows is None else windows
    _, bd, _ = batch_loss(params, cfg, demos, windows)
    return bd


def write_loss_curve(curve: list[LossBreakdown], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "action", "smooth", "coll", "total"])
        for i, b in enumerate(curve):
            w.writerow([i, f"{b.action:.10g}", f"{b.smooth:.10g}", f"{b.coll:.10g}", f"{b.total:.10g}"])
