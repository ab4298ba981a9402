import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from goaldrive import numerics as nx
from goaldrive.config import Config
from goaldrive.hdmap import Pose
from goaldrive.numerics import Tensor, grad_check
from goaldrive.policy import init_params
from goaldrive.sim import Obstacle, generate_scenario
from goaldrive.training import (W_COLL, W_SMOOTH, LossBreakdown, TrainingDiverged, action_loss, collect_demo,
                                collision_penalty, evaluate_loss, load_demos, make_windows, save_demos,
                                select_demos, smoothness_loss, total_loss, train, write_loss_curve)

SMALL = Config(d_model=8, heads=2, patch_vision=16, grid_size=32, map_resolution=0.8, patch_map=16,
               mixer_layers=1, backbone_layers=2, frozen_layers=1, mlp_ratio=2, batch_size=4, epochs=2)


@pytest.fixture(scope="module")
def demos():
    return [collect_demo(generate_scenario(s, "straight"), 0.15, seed=s) for s in (0, 1)]


# ---------------------------------------------------------------- action and smoothness terms

def test_action_loss_examples():
    assert action_loss(Tensor([[0.2, 0.3]]), [[0.2, 0.3]]).item() == 0.0
    assert action_loss(Tensor([[0.0, 0.0]]), [[0.3, 0.4]]).item() == pytest.approx(0.25)


@given(st.integers(1, 30), st.integers(0, 10_000))
def test_action_loss_matches_direct_sum(n, seed):
    r = np.random.default_rng(seed)
    p, e = r.uniform(-1, 1, (n, 2)), r.uniform(-1, 1, (n, 2))
    want = sum((p[i, 0] - e[i, 0]) ** 2 + (p[i, 1] - e[i, 1]) ** 2 for i in range(n)) / n
    assert action_loss(Tensor(p), e).item() == pytest.approx(want, rel=1e-12)


def test_action_loss_length_mismatch():
    with pytest.raises(ValueError):
        action_loss(Tensor(np.zeros((3, 2))), np.zeros((2, 2)))


def test_smoothness_examples():
    assert smoothness_loss(Tensor(np.tile([[0.3, 0.5]], (5, 1)))).item() == 0.0
    assert smoothness_loss(Tensor([[0.0, 0.0], [1.0, 0.0]])).item() == 1.0
    with pytest.raises(ValueError):
        smoothness_loss(Tensor([[0.0, 0.0]]))


@given(st.floats(-1, 1), st.integers(2, 20))
def test_alternating_steering_smoothness(delta, n):
    seq = np.zeros((n, 2))
    seq[:, 0] = delta * (-1.0) ** np.arange(n)
    assert smoothness_loss(Tensor(seq)).item() == pytest.approx(4 * delta * delta, abs=1e-15)


def test_smoothness_respects_window_boundaries():
    seq = Tensor([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    assert smoothness_loss(seq, lens=[2, 2]).item() == 0.0
    assert smoothness_loss(seq).item() == pytest.approx(1.0 / 3)


# ---------------------------------------------------------------- collision term

def _states(n=1, speed=0.0):
    return np.tile([[0.0, 0.0, 0.0, speed]], (n, 1))


def test_collision_penalty_without_obstacles():
    pred = Tensor([[0.0, 1.0]])
    for mode in ("fixed", "soft"):
        assert collision_penalty(pred, _states(), [[]], mode=mode).item() == 0.0


def test_fixed_penalty_for_obstacle_on_path():
    ob = Obstacle(8.0, 0.0, 0.0, 1.0, 1.0)
    pred = Tensor([[0.0, 1.0], [0.0, 0.0]])
    assert collision_penalty(pred, _states(2), [[ob], []], mode="fixed").item() == pytest.approx(0.5)
    assert collision_penalty(Tensor([[0.0, 1.0]]), _states(), [[ob]], mode="fixed").item() == 1.0


def test_soft_penalty_hinge_value():
    ob = Obstacle(2.0 + 0.5 + 0.5, 0.0, 0.0, 1.0, 1.0)  # 0.5 m from the front bumper, ego at rest
    assert collision_penalty(Tensor([[0.0, 0.0]]), _states(), [[ob]], mode="soft").item() == pytest.approx(0.5)


def test_soft_penalty_gradient():
    obs = [Obstacle(9.0, 1.6, 0.2, 1.0, 1.0)]
    pred = Tensor([[0.1, 0.35]], requires_grad=True)
    with nx.Tape():
        val = collision_penalty(pred, _states(speed=2.0), [obs], mode="soft").item()
    assert 0.0 < val < 1.0
    assert grad_check(lambda: collision_penalty(pred, _states(speed=2.0), [obs], mode="soft"), [pred]) < 1e-5


def test_fixed_penalty_has_no_gradient():
    ob = Obstacle(8.0, 0.0, 0.0, 1.0, 1.0)
    pred = Tensor([[0.0, 1.0]], requires_grad=True)
    with nx.Tape():
        out = collision_penalty(pred, _states(), [[ob]], mode="fixed")
    assert not out.requires_grad


# ---------------------------------------------------------------- total

def test_total_zero_for_perfect_constant_match():
    acts = np.tile([[0.1, 0.6]], (4, 1))
    _, bd = total_loss(Tensor(acts), acts, states=_states(4), obstacle_sets=[[]] * 4)
    assert bd.total == 0.0


def test_total_weights():
    assert (W_SMOOTH, W_COLL) == (0.1, 0.05)
    pred = Tensor([[0.0, 0.0], [1.0, 0.0]])
    expert = np.array([[0.5, 0.0], [0.5, 0.0]])  # action 0.25, smooth 1.0
    _, bd = total_loss(pred, expert)
    assert bd.action == pytest.approx(0.25) and bd.smooth == pytest.approx(1.0)
    assert bd.total == pytest.approx(0.35) and bd.check()


@given(st.integers(0, 10_000))
def test_breakdown_invariant(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 6))
    obs = [[Obstacle(*r.uniform(3, 8, 2), 0.0, 1.0, 1.0)] for _ in range(n)]
    _, bd = total_loss(Tensor(r.uniform(0, 1, (n, 2))), r.uniform(0, 1, (n, 2)), states=_states(n, 3.0),
                       obstacle_sets=obs)
    assert bd.check()
    assert abs(bd.total - (bd.action + 0.1 * bd.smooth + 0.05 * bd.coll)) <= 1e-12


def test_flags_drop_terms():
    pred = Tensor([[0.0, 0.0], [1.0, 0.0]])
    _, bd = total_loss(pred, np.zeros((2, 2)), cfg=Config(use_smooth=False))
    assert bd.total == pytest.approx(bd.action) and bd.w_smooth == 0.0 and bd.check()


def test_fixed_collision_is_reported_alongside_soft():
    ob = Obstacle(8.0, 0.0, 0.0, 1.0, 1.0)
    _, bd = total_loss(Tensor([[0.0, 1.0], [0.0, 1.0]]), np.zeros((2, 2)), states=_states(2), obstacle_sets=[[ob]] * 2)
    assert bd.coll_fixed == 1.0 and bd.coll > 0.0


# ---------------------------------------------------------------- demonstrations

def test_demo_actions_are_clean_expert_labels(demos):
    d = demos[0]
    assert len(d) >= 2 and d.frames.dtype == np.uint8 and d.frames.shape[1:] == (64, 64, 3)
    assert np.all(np.abs(d.actions[:, 0]) <= 1) and np.all((d.actions[:, 1] >= 0) & (d.actions[:, 1] <= 1))
    assert d.states.shape == (len(d), 4) and d.waypoints.shape == (len(d), 3)


def test_demo_dump_round_trip(demos, tmp_path):
    save_demos(demos, tmp_path / "d.npz", 32, 0.8)
    back = load_demos(tmp_path / "d.npz")
    assert len(back) == 2
    for a, b in zip(demos, back):
        for name in ("frames", "states", "times", "waypoints", "actions"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert np.array_equal(a.grids(32, 0.8), b.grids(32, 0.8))
        assert b.scenario.to_dict() == a.scenario.to_dict()


def test_grid_cache_matches_direct_raster(demos):
    from goaldrive.hdmap import map_crop
    d = demos[1]
    g = d.grids(32, 0.8, slice(3, 5))
    assert np.array_equal(g[1], map_crop(d.scenario.map, d.pose(4), 32, 0.8).data)


def test_windows_and_fractions(demos):
    w = make_windows(demos, 4)
    assert all(s % 4 == 0 and s < len(demos[di]) - 1 for di, s in w)
    many = list(range(40))
    assert len(select_demos(many, 0.5, 0)) == 20 and len(select_demos(many, 0.25, 0)) == 10
    assert select_demos(many, 0.25, 0) == select_demos(many, 0.25, 0)
    assert select_demos(many, 1.0, 0) == many


# ---------------------------------------------------------------- trainer

def test_zero_epochs_leaves_parameters(demos):
    params = init_params(SMALL)
    before = params.snapshot()
    res = train(params, SMALL, demos, epochs=0)
    assert res.steps == 0 and res.curve == []
    assert all(np.array_equal(before[k], v) for k, v in params.snapshot().items())


def test_training_updates_trainable_only_and_is_deterministic(demos):
    runs = []
    for _ in range(2):
        params = init_params(SMALL)
        before = params.snapshot()
        res = train(params, SMALL, demos, max_steps=6)
        runs.append(params.snapshot())
        for t in params.frozen():
            assert np.array_equal(before[t.name], t.data)
        assert any(not np.array_equal(before[t.name], t.data) for t in params.trainable())
        assert all(b.check() for b in res.curve)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_training_reduces_loss(demos):
    params = init_params(SMALL)
    start = evaluate_loss(params, SMALL, demos).total
    train(params, SMALL, demos, epochs=4)
    assert evaluate_loss(params, SMALL, demos).total < start


def test_loss_is_order_invariant_with_full_batch(demos):
    params = init_params(SMALL)
    w = make_windows(demos, SMALL.window)
    a = evaluate_loss(params, SMALL, demos, w).total
    b = evaluate_loss(params, SMALL, demos, w[::-1]).total
    assert a == pytest.approx(b, rel=1e-12)


def test_divergence_restores_last_finite_parameters(demos):
    params = init_params(SMALL)
    params["head.b2"].data[0, 0] = np.nan  # poisons the first forward pass
    snap = params.snapshot()
    with pytest.raises(TrainingDiverged) as info:
        train(params, SMALL, demos, epochs=1)
    assert info.value.result.steps == 0
    assert all(np.array_equal(snap[k], v, equal_nan=True) for k, v in params.snapshot().items())


def test_loss_curve_csv(tmp_path):
    write_loss_curve([LossBreakdown(0.2, 0.1, 0.0, 0.21)], tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "action", "smooth", "coll", "total"] and rows[1][0] == "0"


def test_empty_demo_set_rejected():
    with pytest.raises(ValueError):
        train(init_params(SMALL), SMALL, [])
