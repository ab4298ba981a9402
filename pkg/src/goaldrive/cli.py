"""Command line entry point: scenario and demo generation, training, evaluation, ablations."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, desk_config, load_config
from .hdmap import CHANNELS, MapFormatError, MapValidationError, Pose, load_map, map_crop, map_from_dict

EXIT_OK = 0
EXIT_INVALID = 1  # invariant or schema violation
EXIT_USAGE = 2

# channel colours for the inspection image, painted in this order
_PALETTE = {"drivable": (70, 70, 70), "crosswalk": (230, 220, 120), "lane": (255, 255, 255), "sign": (220, 40, 40)}


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_scenarios(path):
    from .sim import Scenario
    doc = json.loads(Path(path).read_text())
    docs = doc if isinstance(doc, list) else [doc]
    return [Scenario.from_dict(d) for d in docs]


def cmd_gen(args) -> int:
    from .bench import TRAIN_BASE, EVAL_BASE, suite
    from .training import collect_demo, save_demos
    cfg = _config(args)
    out = _out(args)
    kinds = tuple(args.kinds.split(","))
    n = args.n if args.n is not None else cfg.train_scenarios
    base = TRAIN_BASE if args.split == "train" else EVAL_BASE
    t0 = time.perf_counter()
    scenarios = suite(cfg.seed, n, kinds=kinds, base=base)
    _log(f"generated {len(scenarios)} scenarios in {time.perf_counter() - t0:.1f}s")
    if args.what == "scenarios":
        path = out / "scenarios.json"
        path.write_text(json.dumps([sc.to_dict() for sc in scenarios]))
    else:
        demos = [collect_demo(sc, cfg.demo_noise, seed=sc.seed) for sc in scenarios]
        path = out / "demos.npz"
        save_demos(demos, path, cfg.grid_size, cfg.map_resolution)
        _log(f"{sum(len(d.actions) for d in demos)} labelled steps")
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .bench import DemoCache
    from .config import save_config
    from .policy import init_params, save_checkpoint
    from .training import load_demos, train, write_loss_curve
    cfg = _config(args)
    out = _out(args)
    demos = load_demos(args.demos) if args.demos else DemoCache().get(cfg)
    t0 = time.perf_counter()

    def log(epoch, bd):
        _log(f"epoch {epoch:3d}  total {bd.total:.5f}  action {bd.action:.5f}  smooth {bd.smooth:.5f}  "
             f"coll {bd.coll:.5f}  ({time.perf_counter() - t0:.0f}s)")

    result = train(init_params(cfg), cfg, demos, log=log)
    save_checkpoint(result.params, cfg, out / "model.npz")
    save_config(cfg, out / "config.json")
    write_loss_curve(result.curve, out / "loss.csv")
    print(out / "model.npz")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import compute_metrics, emit_report, named_suite, run_episodes, write_episode_log
    from .policy import ModelPolicy, load_checkpoint
    ckpt = Path(args.checkpoint)
    if args.config is None and (ckpt.parent / "config.json").exists():
        args.config = str(ckpt.parent / "config.json")
    cfg = _config(args)
    out = _out(args)
    model = ModelPolicy(load_checkpoint(ckpt, cfg), cfg)
    n = args.episodes if args.episodes is not None else cfg.eval_episodes
    scenarios = _load_scenarios(args.scenarios) if args.scenarios else named_suite(args.suite, cfg.seed, n)
    monitor = cfg.monitor and not args.no_monitor
    t0 = time.perf_counter()
    results = run_episodes(model, scenarios, monitor=monitor, explain=args.explain)
    _log(f"{len(results)} episodes in {time.perf_counter() - t0:.1f}s")
    m = compute_metrics(results)
    row = {"id": cfg.ablation, "SR": m.SR, "SPL": m.SPL, "collision_rate": m.collision_rate,
           "seed": cfg.seed, "config_hash": cfg.hash()}
    emit_report([row], out)
    write_episode_log(results, out / "episodes.jsonl")
    print(f"SR {m.SR:.3f}  SPL {m.SPL:.3f}  collision_rate {m.collision_rate:.3f}  episodes {m.episodes}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .bench import ABLATION_IDS, DemoCache, emit_report, named_suite, run_ablation, write_episode_log
    cfg = _config(args)
    out = _out(args)
    ids = [s.strip() for s in args.ids.split(",") if s.strip()]
    bad = [i for i in ids if i not in ABLATION_IDS]
    if bad:
        _log(f"unknown ablation ids: {bad}")
        return EXIT_USAGE
    n = args.episodes if args.episodes is not None else cfg.eval_episodes
    scenarios = named_suite(args.suite, cfg.seed, n)
    cache = DemoCache()
    rows = []
    for ab in ids:
        t0 = time.perf_counter()
        summary, row, results = run_ablation(cfg, ab, cache, scenarios, out_dir=out)
        write_episode_log(results, out / ab / "episodes.jsonl")
        rows.append(row)
        _log(f"{ab:4s}  SR {summary.SR:.3f}  SPL {summary.SPL:.3f}  "
             f"collision_rate {summary.collision_rate:.3f}  ({time.perf_counter() - t0:.0f}s)")
    csv_path, md_path = emit_report(rows, out)
    print(md_path.read_text(), end="")
    return EXIT_OK


def grid_to_rgb(data: np.ndarray) -> np.ndarray:
    """(4,S,S) binary planes -> (S,S,3) uint8 image, later channels painted on top."""
    img = np.zeros(data.shape[1:] + (3,), dtype=np.uint8)
    for name in ("drivable", "crosswalk", "lane", "sign"):
        img[data[CHANNELS.index(name)] > 0] = _PALETTE[name]
    return img


def write_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def cmd_rasterize(args) -> int:
    cfg = _config(args)
    out = _out(args)
    if args.scenario:
        sc = _load_scenarios(args.scenario)[0]
        vmap, pose = sc.map, sc.start
    else:
        vmap, pose = load_map(args.map), Pose(0.0, 0.0, 0.0)
    if args.pose:
        pose = Pose(*[float(v) for v in args.pose.split(",")])
    size = args.size or cfg.grid_size
    res = args.resolution or cfg.map_resolution
    grid = map_crop(vmap, pose, size, res)
    path = out / "raster.ppm"
    write_ppm(grid_to_rgb(grid.data), path)
    counts = {c: int(grid.data[i].sum()) for i, c in enumerate(CHANNELS)}
    _log(f"set pixels per channel: {counts}")
    print(path)
    return EXIT_OK


def _detect_kind(doc) -> str:
    if isinstance(doc, list) or (isinstance(doc, dict) and "waypoints" in doc):
        return "scenario"
    if isinstance(doc, dict) and any(k in doc for k in ("lanes", "crosswalks", "signs", "drivable_area")):
        return "map"
    return "config"


def schema_check(path, kind: str = "auto") -> tuple[str, list[str]]:
    """Validate one file; returns (detected kind, list of problems)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        return kind, [f"line {exc.lineno} column {exc.colno}: {exc.msg}"]
    except OSError as exc:
        return kind, [exc.strerror or str(exc)]
    kind = _detect_kind(doc) if kind == "auto" else kind
    problems = []
    if kind == "map":
        try:
            map_from_dict(doc)
        except (MapFormatError, MapValidationError) as exc:
            problems.append(str(exc))
    elif kind == "scenario":
        from .sim import Scenario
        for i, d in enumerate(doc if isinstance(doc, list) else [doc]):
            try:
                sc = Scenario.from_dict(d)
                wp = np.asarray(sc.waypoints)
                if wp.ndim != 2 or wp.shape[1] != 3 or not np.isfinite(wp).all() or len(wp) < 1:
                    problems.append(f"scenario[{i}]: waypoints must be a non-empty finite (n, 3) list")
                if len(sc.waypoint_s) != len(wp) or np.any(np.diff(sc.waypoint_s) < 0):
                    problems.append(f"scenario[{i}]: waypoint_s must be non-decreasing and match waypoints")
                if sc.budget_s <= 0:
                    problems.append(f"scenario[{i}]: budget_s must be positive")
            except (MapFormatError, MapValidationError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"scenario[{i}]: {type(exc).__name__}: {exc}")
    elif kind == "config":
        try:
            if not isinstance(doc, dict):
                raise ValueError("config must be an object")
            known = {f.name for f in dataclasses.fields(Config)}
            unknown = set(doc) - known
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            Config(**doc)
        except (TypeError, ValueError) as exc:
            problems.append(str(exc))
    else:
        problems.append(f"unknown kind {kind!r}")
    return kind, problems


def cmd_schema_check(args) -> int:
    status = EXIT_OK
    for path in args.files:
        kind, problems = schema_check(path, args.kind)
        if problems:
            status = EXIT_INVALID
            for p in problems:
                print(f"{path}: {kind}: {p}")
        else:
            print(f"{path}: {kind}: ok")
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="goaldrive", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--config", default=None, help="config JSON; defaults to the desk preset")
    p.add_argument("--out", default="out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate scenarios or expert demonstrations")
    g.add_argument("what", choices=("scenarios", "demos"))
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--kinds", default="straight,turn,ambiguous_intersection")
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a policy by behaviour cloning")
    t.add_argument("--demos", default=None, help="demos .npz from 'gen demos'; generated when omitted")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", default="benchmark", choices=("benchmark", "straight_turn", "ambiguous",
                                                           "lane_precision"))
    e.add_argument("--scenarios", default=None, help="scenarios JSON instead of a generated suite")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--no-monitor", action="store_true", help="disable the safety override")
    e.add_argument("--explain", action="store_true", help="log attention explanations per step")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate ablation variants")
    a.add_argument("--ids", default="Full")
    a.add_argument("--suite", default="benchmark", choices=("benchmark", "straight_turn", "ambiguous",
                                                           "lane_precision"))
    a.add_argument("--episodes", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("rasterize", help="write a map crop as a PPM image")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--map")
    src.add_argument("--scenario")
    r.add_argument("--pose", default=None, help="x,y,yaw in metres and radians")
    r.add_argument("--size", type=int, default=None)
    r.add_argument("--resolution", type=float, default=None)
    r.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("schema-check", help="validate map, scenario or config files")
    s.add_argument("files", nargs="+")
    s.add_argument("--kind", choices=("auto", "map", "scenario", "config"), default="auto")
    s.set_defaults(func=cmd_schema_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MapFormatError, MapValidationError) as exc:
        _log(f"error: {exc}")
        return EXIT_INVALID
    except OSError as exc:
        _log(f"error: {exc.strerror}: {exc.filename}")
        return EXIT_INVALID
    except (ValueError, RuntimeError) as exc:
        # checkpoint mismatch, divergence, invalid episode results and config errors
        _log(f"error: {type(exc).__name__}: {exc}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
