import json

import numpy as np
import pytest

from goaldrive.cli import EXIT_INVALID, EXIT_OK, EXIT_USAGE, main, schema_check
from goaldrive.config import Config, save_config
from goaldrive.hdmap import save_map
from goaldrive.sim import generate_scenario


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    cfg = Config(d_model=8, heads=2, patch_vision=16, grid_size=32, map_resolution=0.8, patch_map=16,
                 mixer_layers=1, backbone_layers=2, frozen_layers=1, mlp_ratio=2, batch_size=4, epochs=1,
                 train_scenarios=2, eval_episodes=2)
    save_config(cfg, path)
    return path


def test_gen_scenarios_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["--seed", "3", "--out", str(tmp_path / d), "gen", "scenarios", "--n", "3"]) == EXIT_OK
    a, b = (tmp_path / d / "scenarios.json" for d in "ab")
    assert a.read_bytes() == b.read_bytes()
    assert len(json.loads(a.read_text())) == 3
    assert main(["schema-check", str(a)]) == EXIT_OK
    assert "scenario: ok" in capsys.readouterr().out


def test_schema_check_flags_bad_files(tmp_path, capsys):
    good = tmp_path / "map.json"
    save_map(generate_scenario(0, "turn").map, good)
    broken = tmp_path / "broken.json"
    broken.write_text("{\"lanes\": [")
    bad_map = tmp_path / "bad_map.json"
    doc = json.loads(good.read_text())
    doc["lanes"][0]["points"] = [[0.0, 0.0]]
    bad_map.write_text(json.dumps(doc))
    bad_cfg = tmp_path / "cfg.json"
    bad_cfg.write_text(json.dumps({"d_model": 8, "warp_drive": 1}))
    assert main(["schema-check", str(good)]) == EXIT_OK
    assert main(["schema-check", str(good), str(broken)]) == EXIT_INVALID
    assert main(["schema-check", str(bad_map)]) == EXIT_INVALID
    assert schema_check(bad_cfg)[0] == "config" and "warp_drive" in schema_check(bad_cfg)[1][0]
    out = capsys.readouterr().out
    assert "line 1" in out


def test_rasterize_writes_ppm(tmp_path):
    main(["--out", str(tmp_path), "gen", "scenarios", "--n", "1", "--kinds", "turn"])
    rc = main(["--out", str(tmp_path), "rasterize", "--scenario", str(tmp_path / "scenarios.json"), "--size", "40"])
    assert rc == EXIT_OK
    data = (tmp_path / "raster.ppm").read_bytes()
    header = b"P6 40 40 255\n"
    assert data.startswith(header) and len(data) == len(header) + 40 * 40 * 3
    img = np.frombuffer(data[len(header):], dtype=np.uint8).reshape(40, 40, 3)
    assert (img == 255).all(axis=2).any()  # lane markings visible


def test_rasterize_missing_map(tmp_path):
    assert main(["--out", str(tmp_path), "rasterize", "--map", str(tmp_path / "nope.json")]) == EXIT_INVALID


def test_unknown_ablation_id(tmp_path):
    assert main(["--out", str(tmp_path), "ablate", "--ids", "Full,Q7"]) == EXIT_USAGE


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE


def test_train_then_eval(tmp_path, small_config, capsys):
    common = ["--config", str(small_config), "--seed", "1", "--out"]
    assert main(common + [str(tmp_path / "d"), "gen", "demos", "--kinds", "straight"]) == EXIT_OK
    assert main(common + [str(tmp_path / "m"), "train", "--demos", str(tmp_path / "d" / "demos.npz")]) == EXIT_OK
    lines = (tmp_path / "m" / "loss.csv").read_text().splitlines()
    assert len(lines) == 2
    ckpt = tmp_path / "m" / "model.npz"
    rc = main(["--out", str(tmp_path / "e"), "eval", "--checkpoint", str(ckpt), "--suite", "straight_turn",
               "--episodes", "2", "--explain"])
    assert rc == EXIT_OK
    assert "SR " in capsys.readouterr().out
    metrics = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("ID,dSR,SR") and len(metrics) == 2
    eps = (tmp_path / "e" / "episodes.jsonl").read_text().splitlines()
    assert len(eps) == 2 and json.loads(eps[0])["explanations"]
