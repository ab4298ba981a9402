"""Episode runner, navigation metrics, the ablation matrix and report files."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .hdmap import map_crop
from .policy import ModelPolicy, init_params, safety_override, save_checkpoint
from .sim import Action, Drive, Scenario, expert_policy, generate_scenario, render_front_view

ARRIVAL_RADIUS = 2.0
LENGTH_EPS = 1e-6
ABLATION_IDS = ("Full", "A1", "A2", "A3", "B1", "B2", "C1", "C2", "D1", "D2", "E1", "E2", "F1", "F2", "G1", "G2")
ABLATION_NOTES = {
    "Full": "all components",
    "A1": "goal tokens replaced by learned null tokens",
    "A2": "no map tokens",
    "A3": "vision only (no goal, no map)",
    "B1": "concatenation instead of goal cross-attention",
    "B2": "late fusion of pooled map tokens at the head",
    "C1": "vision patch size doubled",
    "C2": "two-layer strided convolution vision encoder",
    "D1": "all backbone layers frozen",
    "D2": "one mixer layer",
    "E1": "map at 0.4 m/px",
    "E2": "map at 0.05 m/px",
    "F1": "half of the demonstrations",
    "F2": "a quarter of the demonstrations",
    "G1": "no smoothness term",
    "G2": "no collision term",
}

# scenario seed ranges; both bases are even so ambiguous pairs stay aligned
TRAIN_BASE = 0
EVAL_BASE = 5_000_000
SEED_STRIDE = 100_000


# ---------------------------------------------------------------- results and metrics

@dataclass
class EpisodeResult:
    success: bool
    L_opt: float
    L_agent: float
    collided: bool
    infraction: bool
    steps: int
    override_count: int = 0
    timeout: bool = False
    failure: str = ""
    seed: int = 0
    difficulty: str = ""
    mean_action_change: float = 0.0
    explanations: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.success and (self.collided or self.infraction):
            raise ValueError("a successful episode cannot collide or leave the drivable area")
        if self.L_agent < 0:
            raise ValueError("L_agent must be non-negative")

    def spl(self) -> float:
        if not self.success:
            return 0.0
        if self.L_agent <= 0:
            return 1.0
        return min(1.0, self.L_opt / self.L_agent)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["explanations"] is None:
            d.pop("explanations")
        return d


@dataclass(frozen=True)
class MetricsSummary:
    SR: float
    SPL: float
    collision_rate: float
    episodes: int


def compute_metrics(results) -> MetricsSummary:
    results = list(results)
    if not results:
        raise ValueError("compute_metrics needs at least one episode")
    n = len(results)
    sr = math.fsum(1.0 for r in results if r.success) / n
    spl = math.fsum(r.spl() for r in results) / n
    cr = math.fsum(1.0 for r in results if r.collided or r.infraction) / n
    return MetricsSummary(sr, min(spl, sr), cr, n)


# ---------------------------------------------------------------- policies and episodes

class ExpertPolicy:
    """The privileged pure-pursuit expert, usable wherever a model is."""

    def act_drives(self, drives):
        return [expert_policy(d.state, d.scenario, d.t) for d in drives], None


class ConstantPolicy:
    def __init__(self, action: Action):
        self.action = action

    def act_drives(self, drives):
        return [self.action] * len(drives), None


def observe(drive: Drive, cfg: Config):
    """Frame, map raster and relative next waypoint for the current state."""
    frame = render_front_view(drive.scenario.map, drive.scenario.obstacles, drive.state, drive.t)
    grid = map_crop(drive.scenario.map, drive.state.pose, cfg.grid_size, cfg.map_resolution).data if cfg.use_map \
        else np.zeros((4, cfg.grid_size, cfg.grid_size), dtype=np.uint8)
    return np.round(frame * 255.0).astype(np.uint8), grid, drive.relative_waypoint()


class ModelAdapter:
    """Feeds simulator observations to a ModelPolicy in one batch per control step."""

    def __init__(self, model: ModelPolicy, explain: bool = False):
        self.model = model
        self.explain = explain

    def act_drives(self, drives):
        obs = [observe(d, self.model.cfg) for d in drives]
        frames = np.stack([o[0] for o in obs])
        grids = np.stack([o[1] for o in obs]) if self.model.cfg.use_map else None
        return self.model.act_batch(frames, grids, [o[2] for o in obs], with_explanation=self.explain)


def as_policy(policy):
    return ModelAdapter(policy) if isinstance(policy, ModelPolicy) else policy


def run_episodes(policy, scenarios, monitor: bool = True, explain: bool = False) -> list[EpisodeResult]:
    """Run episodes in lockstep so the model sees one batch per control step.

    Each episode's trajectory only depends on its own scenario and the
    policy. Batched matrix products can differ from single-sample ones in
    the last bits, so results are reproducible for a fixed scenario list
    but not guaranteed bit-equal to one-at-a-time runs.
    """
    if isinstance(policy, ModelPolicy):
        policy = ModelAdapter(policy, explain)
    drives = [Drive(sc, ARRIVAL_RADIUS) for sc in scenarios]
    overrides = [0] * len(drives)
    logs = [[] for _ in drives] if explain else None
    prev = [None] * len(drives)
    change = [[] for _ in drives]
    while True:
        active = [i for i, d in enumerate(drives) if not d.done]
        if not active:
            break
        actions, recs = policy.act_drives([drives[i] for i in active])
        for j, i in enumerate(active):
            d, a = drives[i], actions[j]
            if not a.finite:
                d.failed = "non-finite action"
                continue
            if prev[i] is not None:
                change[i].append((a.steering - prev[i].steering) ** 2 + (a.speed - prev[i].speed) ** 2)
            prev[i] = a
            flag = False
            if monitor:
                a, flag = safety_override(a, d.state, d.scenario.obstacles, d.t)
                overrides[i] += int(flag)
            if logs is not None and recs is not None:
                rec = dict(recs[j], step=d.steps, override=flag)
                logs[i].append(rec)
            d.step(a)
    out = []
    for i, d in enumerate(drives):
        sc = d.scenario
        out.append(EpisodeResult(
            success=bool(d.arrived and not d.collided and not d.infraction),
            L_opt=max(sc.goal_distance - ARRIVAL_RADIUS, 0.0), L_agent=d.path_length,
            collided=d.collided, infraction=d.infraction, steps=d.steps, override_count=overrides[i],
            timeout=d.timeout, failure=d.failed, seed=sc.seed, difficulty=sc.difficulty,
            mean_action_change=float(np.mean(change[i])) if change[i] else 0.0,
            explanations=logs[i] if logs is not None else None))
    return out


def run_episode(policy, scenario: Scenario, monitor: bool = True, explain: bool = False) -> EpisodeResult:
    return run_episodes(policy, [scenario], monitor, explain)[0]


# ---------------------------------------------------------------- suites

def scenario_seed(master: int, index: int, base: int) -> int:
    return base + master * SEED_STRIDE + index


def suite(master: int, n: int, kinds=("straight", "turn", "ambiguous_intersection"), base: int = EVAL_BASE,
          **kwargs) -> list[Scenario]:
    """n scenarios cycling through ``kinds``; ambiguous ones come in mirrored pairs."""
    out = []
    i = 0
    while len(out) < n:
        kind = kinds[(i // 2) % len(kinds)]  # two consecutive indices per kind keeps pairs together
        out.append(generate_scenario(scenario_seed(master, i, base), kind, **kwargs))
        i += 1
    return out


def training_scenarios(cfg: Config) -> list[Scenario]:
    return suite(cfg.seed, cfg.train_scenarios, base=TRAIN_BASE)


def benchmark_scenarios(cfg: Config) -> list[Scenario]:
    return suite(cfg.seed, cfg.eval_episodes, base=EVAL_BASE)


def lane_precision_suite(master: int, n: int) -> list[Scenario]:
    """Turns on a narrower road with parked cars close to its edge."""
    return suite(master, n, kinds=("turn",), base=EVAL_BASE + 50_000, road_half_width=2.5,
                 obstacle_gap=(0.3, 0.8))


SUITES = ("benchmark", "straight_turn", "ambiguous", "lane_precision")


def named_suite(name: str, master: int, n: int) -> list[Scenario]:
    if name == "benchmark":
        return suite(master, n)
    if name == "straight_turn":
        return suite(master, n, kinds=("straight", "turn"))
    if name == "ambiguous":
        return suite(master, n, kinds=("ambiguous_intersection",))
    if name == "lane_precision":
        return lane_precision_suite(master, n)
    raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")


# ---------------------------------------------------------------- ablations

def ablation_config(base: Config, ablation_id: str) -> Config:
    if ablation_id not in ABLATION_IDS:
        raise ValueError(f"unknown ablation id {ablation_id!r}")
    c = {"ablation": ablation_id}
    if ablation_id == "A1":
        c["use_goal"] = False
    elif ablation_id == "A2":
        c["use_map"] = False
    elif ablation_id == "A3":
        c.update(use_goal=False, use_map=False)
    elif ablation_id == "B1":
        c["fusion"] = "concat"
    elif ablation_id == "B2":
        c["fusion"] = "late"
    elif ablation_id == "C1":
        c["patch_vision"] = base.patch_vision * 2
    elif ablation_id == "C2":
        c["vision_encoder"] = "conv"
    elif ablation_id == "D1":
        c["frozen_layers"] = base.backbone_layers
    elif ablation_id == "D2":
        c["mixer_layers"] = 1
    elif ablation_id in ("E1", "E2"):
        res = 0.4 if ablation_id == "E1" else 0.05
        window = base.grid_size * base.map_resolution
        size = int(round(window / res))
        patch = int(round(base.patch_map * base.map_resolution / res))  # same metres per patch
        c.update(map_resolution=res, grid_size=size, patch_map=patch)
    elif ablation_id == "F1":
        c["data_fraction"] = 0.5
    elif ablation_id == "F2":
        c["data_fraction"] = 0.25
    elif ablation_id == "G1":
        c["use_smooth"] = False
    elif ablation_id == "G2":
        c["use_collision"] = False
    return base.replace(**c)


class DemoCache:
    """Demonstrations per (seed, scenario count, noise), shared across ablations."""

    def __init__(self):
        self._store = {}

    def get(self, cfg: Config):
        from .training import collect_demo
        key = (cfg.seed, cfg.train_scenarios, cfg.demo_noise)
        if key not in self._store:
            self._store[key] = [collect_demo(sc, cfg.demo_noise, seed=sc.seed) for sc in training_scenarios(cfg)]
        return self._store[key]


def train_model(cfg: Config, demos, log=None):
    from .training import train
    params = init_params(cfg)
    result = train(params, cfg, demos, log=log)
    return ModelPolicy(result.params, cfg), result


def run_ablation(base: Config, ablation_id: str, cache: DemoCache | None = None, scenarios=None,
                 out_dir=None, reference_sr: float | None = None):
    """Train the id's variant from the base seed and evaluate it; returns (summary, row, results)."""
    cfg = ablation_config(base, ablation_id)
    cache = cache or DemoCache()
    model, tr = train_model(cfg, cache.get(cfg))
    scenarios = benchmark_scenarios(cfg) if scenarios is None else scenarios
    results = run_episodes(model, scenarios, monitor=cfg.monitor)
    summary = compute_metrics(results)
    row = {"id": ablation_id, "SR": summary.SR, "SPL": summary.SPL, "collision_rate": summary.collision_rate,
           "seed": cfg.seed, "config_hash": cfg.hash()}
    if out_dir is not None:
        from .training import write_loss_curve
        out = Path(out_dir) / ablation_id
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model.params, cfg, out / "model.npz")
        write_loss_curve(tr.curve, out / "loss.csv")
        (out / "config.json").write_text(cfg.canonical_json())
    return summary, row, results


def _order(rows):
    return sorted(rows, key=lambda r: ABLATION_IDS.index(r["id"]))


def report_tables(rows) -> tuple[str, str]:
    """(csv text, markdown text) with columns ID, dSR, SR, SPL, collision_rate, seed, config hash."""
    if not rows:
        raise ValueError("report needs at least one row")
    rows = _order(rows)
    full = next((r for r in rows if r["id"] == "Full"), None)
    header = ["ID", "dSR", "SR", "SPL", "collision_rate", "seed", "config_hash"]
    table = []
    for r in rows:
        delta = "" if r["id"] == "Full" or full is None else f"{r['SR'] - full['SR']:+.3f}"
        table.append([r["id"], delta, f"{r['SR']:.3f}", f"{r['SPL']:.3f}", f"{r['collision_rate']:.3f}",
                      str(r["seed"]), r["config_hash"]])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(table)
    md = ["| " + " | ".join(["ID", "ΔSR", "SR", "SPL", "collision rate", "seed", "config hash"]) + " |",
          "|" + "---|" * len(header)]
    for row in table:
        md.append("| " + " | ".join(c if c else "---" for c in row) + " |")
    return buf.getvalue(), "\n".join(md) + "\n"


def emit_report(rows, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_text, md_text = report_tables(rows)
    (out / "metrics.csv").write_text(csv_text)
    (out / "report.md").write_text(md_text)
    return out / "metrics.csv", out / "report.md"


def write_episode_log(results, path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
