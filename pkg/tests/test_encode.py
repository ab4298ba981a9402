import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from goaldrive.config import Config
from goaldrive.encode import (Waypoint, encode_goal, encode_map, fourier_features, format_goal_prompt,
                              parse_goal_prompt, patchify, tokenize_frame)
from goaldrive.numerics import Params, ShapeError
from goaldrive.policy import init_params


def test_prompt_template():
    assert format_goal_prompt(Waypoint(12.5, -3.0, 45.0)) == "<goal> east=12.5m, north=-3.0m, yaw=45.0° </goal>"
    assert format_goal_prompt(Waypoint(0.0, 0.0, 0.0)) == "<goal> east=0.0m, north=0.0m, yaw=0.0° </goal>"


def test_prompt_has_no_negative_zero():
    assert format_goal_prompt(Waypoint(-0.01, -0.0, -0.04)) == "<goal> east=0.0m, north=0.0m, yaw=0.0° </goal>"


@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(-179.9, 180))
def test_prompt_round_trip(e, n, y):
    wp = Waypoint(e, n, y)
    back = parse_goal_prompt(format_goal_prompt(wp))
    assert abs(back.east - wp.east) <= 0.05 + 1e-9
    assert abs(back.north - wp.north) <= 0.05 + 1e-9
    dy = (back.yaw - wp.yaw + 180.0) % 360.0 - 180.0
    assert abs(dy) <= 0.05 + 1e-9


def test_parse_rejects_other_text():
    with pytest.raises(ValueError):
        parse_goal_prompt("<goal> east=1m </goal>")


def test_waypoint_yaw_wraps_to_half_open_interval():
    assert Waypoint(0, 0, -180.0).yaw == 180.0
    assert Waypoint(0, 0, 190.0).yaw == pytest.approx(-170.0)
    with pytest.raises(ValueError):
        Waypoint(float("nan"), 0, 0)
    assert Waypoint(1, 2, 90).as_array()[2] == pytest.approx(math.pi / 2)


def test_fourier_features_at_zero():
    f = fourier_features(np.array([0.0]), "east")[0]
    assert np.array_equal(f[0::2], np.zeros(8)) and np.array_equal(f[1::2], np.ones(8))


def test_fourier_features_closed_form():
    x = 3.7
    f = fourier_features(np.array([x]), "north")[0]
    w = 2 * np.pi / (2.0 * 2.0 ** np.arange(8))
    assert np.allclose(f[0::2], np.sin(w * x)) and np.allclose(f[1::2], np.cos(w * x))


def test_yaw_features_are_periodic():
    a = fourier_features(np.array([0.5]), "yaw")
    b = fourier_features(np.array([0.5 + 2 * np.pi]), "yaw")
    assert np.allclose(a, b)


def test_patchify_order():
    img = np.arange(4 * 4).reshape(1, 4, 4, 1).astype(float)
    p = patchify(img, 2)
    assert p.shape == (4, 4)
    assert list(p[1]) == [2, 3, 6, 7]
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 5, 4, 1)), 2)


def test_default_token_counts():
    cfg = Config()
    assert cfg.vision_tokens == 64 and cfg.map_tokens == 256
    params = init_params(cfg)
    v = tokenize_frame(params, cfg, np.zeros((1, 64, 64, 3)))
    m = encode_map(params, cfg, np.zeros((1, 4, 256, 256), dtype=np.uint8))
    g = encode_goal(params, cfg, np.zeros((1, 3)))
    assert (len(v), len(m), len(g)) == (64, 256, 8)
    assert v.tokens.cols == m.tokens.cols == g.tokens.cols == cfg.d_model


def test_zero_frame_gives_position_plus_bias(tiny_cfg):
    params = init_params(tiny_cfg)
    v = tokenize_frame(params, tiny_cfg, np.zeros((2, 16, 16, 3)))
    want = params["vis.pos"].data + params["vis.b"].data
    assert np.allclose(v.tokens.data, np.vstack([want, want]))


def test_zero_grid_gives_position_only_tokens(tiny_cfg):
    params = init_params(tiny_cfg)
    m = encode_map(params, tiny_cfg, np.zeros((1, 4, 16, 16), dtype=np.uint8))
    assert np.allclose(m.tokens.data, params["map.pos"].data + params["map.b"].data)


def test_frame_tokenization_is_patch_local(tiny_cfg, rng):
    params = init_params(tiny_cfg)
    frame = rng.uniform(size=(1, 16, 16, 3))
    base = tokenize_frame(params, tiny_cfg, frame).tokens.data
    swapped = frame.copy()
    swapped[0, :8, :8], swapped[0, 8:, 8:] = frame[0, 8:, 8:], frame[0, :8, :8]
    out = tokenize_frame(params, tiny_cfg, swapped).tokens.data
    content = base - params["vis.pos"].data
    content2 = out - params["vis.pos"].data
    assert np.allclose(content2[0], content[3]) and np.allclose(content2[3], content[0])
    assert np.allclose(out[1:3], base[1:3])


def test_single_map_pixel_changes_one_token(tiny_cfg):
    params = init_params(tiny_cfg)
    grid = np.zeros((1, 4, 16, 16), dtype=np.uint8)
    base = encode_map(params, tiny_cfg, grid).tokens.data
    grid[0, 2, 9, 3] = 1
    diff = np.abs(encode_map(params, tiny_cfg, grid).tokens.data - base).sum(axis=1)
    assert list(np.nonzero(diff)[0]) == [2]  # row 9 -> patch row 1, col 3 -> patch col 0


def test_uint8_and_float_frames_agree(tiny_cfg, rng):
    params = init_params(tiny_cfg)
    f8 = rng.integers(0, 256, (1, 16, 16, 3), dtype=np.uint8)
    a = tokenize_frame(params, tiny_cfg, f8).tokens.data
    b = tokenize_frame(params, tiny_cfg, f8 / 255.0).tokens.data
    assert np.allclose(a, b)


def test_goal_slots_separate_fields(tiny_cfg):
    params = init_params(tiny_cfg)
    a = encode_goal(params, tiny_cfg, Waypoint(3.0, 10.0, 20.0).as_array()[None]).tokens.data
    b = encode_goal(params, tiny_cfg, Waypoint(3.0, 10.0, -60.0).as_array()[None]).tokens.data
    same = [0, 1, 2, 3, 4, 7]
    assert np.array_equal(a[same], b[same])
    assert not np.allclose(a[5], b[5]) and not np.allclose(a[6], b[6])


def test_goal_delimiters_are_learned_embeddings(tiny_cfg):
    params = init_params(tiny_cfg)
    g = encode_goal(params, tiny_cfg, np.array([[1.0, 2.0, 0.3]])).tokens.data
    assert np.array_equal(g[0], params["goal.open"].data[0]) and np.array_equal(g[7], params["goal.close"].data[0])


def test_goal_encoding_is_continuous(tiny_cfg):
    params = init_params(tiny_cfg)
    a = encode_goal(params, tiny_cfg, np.array([[4.0, -2.0, 0.1]])).tokens.data
    b = encode_goal(params, tiny_cfg, np.array([[4.0 + 1e-10, -2.0 - 1e-10, 0.1 + 1e-10]])).tokens.data
    assert np.max(np.abs(a - b)) < 1e-6


def test_batched_goal_matches_single(tiny_cfg):
    params = init_params(tiny_cfg)
    wps = np.array([[1.0, 2.0, 0.1], [-4.0, 9.0, -1.0], [0.0, 0.0, 3.0]])
    batched = encode_goal(params, tiny_cfg, wps).tokens.data
    for b in range(3):
        single = encode_goal(params, tiny_cfg, wps[b:b + 1]).tokens.data
        assert np.allclose(batched[8 * b:8 * b + 8], single, rtol=0, atol=1e-12)


def test_null_goal_tokens_ignore_waypoint(tiny_cfg):
    cfg = tiny_cfg.replace(use_goal=False)
    params = init_params(cfg)
    a = encode_goal(params, cfg, np.array([[1.0, 2.0, 0.1]])).tokens.data
    b = encode_goal(params, cfg, np.array([[-9.0, 5.0, 2.0]])).tokens.data
    assert np.array_equal(a, b) and a.shape == (8, cfg.d_model)


def test_conv_encoder_shapes(tiny_cfg, rng):
    cfg = tiny_cfg.replace(vision_encoder="conv")
    params = init_params(cfg)
    v = tokenize_frame(params, cfg, rng.uniform(size=(2, 16, 16, 3)))
    assert v.tokens.shape == (2 * 4, cfg.d_model)


def test_encoders_are_deterministic(tiny_cfg, rng):
    params = init_params(tiny_cfg)
    f = rng.uniform(size=(1, 16, 16, 3))
    assert np.array_equal(tokenize_frame(params, tiny_cfg, f).tokens.data,
                          tokenize_frame(params, tiny_cfg, f).tokens.data)


def test_param_names_are_unique(tiny_cfg):
    p = init_params(tiny_cfg)
    assert isinstance(p, Params) and len(set(p.names())) == len(p)
