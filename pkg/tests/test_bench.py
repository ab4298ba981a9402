import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from goaldrive.bench import (ABLATION_IDS, ConstantPolicy, EpisodeResult, ExpertPolicy, MetricsSummary,
                             ablation_config, compute_metrics, emit_report, named_suite, report_tables,
                             run_episode, run_episodes, suite, write_episode_log)
from goaldrive.config import Config, desk_config
from goaldrive.policy import ModelPolicy, init_params
from goaldrive.sim import Action

from builders import wall_scenario
from oracles import naive_metrics


def result(success=True, L_opt=10.0, L_agent=12.0, collided=False, infraction=False, **kw):
    return EpisodeResult(success, L_opt, L_agent, collided, infraction, steps=10, **kw)


# ---------------------------------------------------------------- episodes

def test_expert_succeeds_on_generated_scenarios():
    scs = suite(0, 6)
    res = run_episodes(ExpertPolicy(), scs, monitor=False)
    assert all(r.success for r in res)
    assert all(r.L_agent >= r.L_opt - 1e-6 for r in res)


def test_full_throttle_into_wall():
    sc = wall_scenario()
    off = run_episode(ConstantPolicy(Action(0.0, 1.0)), sc, monitor=False)
    on = run_episode(ConstantPolicy(Action(0.0, 1.0)), sc, monitor=True)
    assert off.collided and not off.success
    assert not on.collided and on.override_count > 0


def test_episode_is_deterministic():
    sc = suite(3, 1, kinds=("turn",))[0]
    a = run_episode(ExpertPolicy(), sc)
    b = run_episode(ExpertPolicy(), sc)
    assert a == b


def test_non_finite_action_fails_episode():
    r = run_episode(ConstantPolicy(Action(float("nan"), 0.5)), wall_scenario())
    assert r.failure == "non-finite action" and not r.success


def test_model_episodes_log_explanations():
    cfg = desk_config(eval_episodes=2)
    model = ModelPolicy(init_params(cfg), cfg)
    sc = named_suite("straight_turn", 0, 2)
    for sc_ in sc:
        sc_.budget_s = 1.0  # a handful of steps is enough here
    res = run_episodes(model, sc, explain=True)
    rec = res[0].explanations[0]
    assert rec["available"] and len(rec["vision"]) == 5 and "override" in rec and rec["step"] == 0
    assert rec["goal_prompt"].startswith("<goal> east=")


def test_named_suites():
    assert {s.difficulty for s in named_suite("ambiguous", 0, 4)} == {"ambiguous_intersection"}
    assert {s.difficulty for s in named_suite("straight_turn", 0, 4)} == {"straight", "turn"}
    with pytest.raises(ValueError):
        named_suite("mountain", 0, 1)


def test_suite_keeps_ambiguous_pairs_together():
    scs = suite(0, 6)
    amb = [s for s in scs if s.difficulty == "ambiguous_intersection"]
    assert {s.variant for s in amb} == {"left", "right"}


# ---------------------------------------------------------------- metrics

def test_metric_examples():
    res = [result(), result(), result(), result(success=False, collided=True)]
    assert compute_metrics(res).SR == 0.75
    assert result(L_opt=100, L_agent=125).spl() == pytest.approx(0.8)
    assert result(success=False, L_opt=100, L_agent=100).spl() == 0.0


def test_metrics_need_episodes():
    with pytest.raises(ValueError):
        compute_metrics([])


def test_result_invariants():
    with pytest.raises(ValueError):
        result(success=True, collided=True)
    with pytest.raises(ValueError):
        result(L_agent=-1.0)


def test_spl_clamped_when_agent_path_is_shorter():
    assert result(L_opt=10.0, L_agent=9.0).spl() == 1.0


random_results = st.lists(
    st.builds(lambda s, lo, la, c, i: result(success=s and not (c or i), L_opt=lo, L_agent=la, collided=c,
                                             infraction=i),
              st.booleans(), st.floats(0, 200), st.floats(0, 300), st.booleans(), st.booleans()),
    min_size=1, max_size=40)


@given(random_results)
def test_spl_never_exceeds_sr(res):
    m = compute_metrics(res)
    assert m.SPL <= m.SR
    assert all(0.0 <= r.spl() <= 1.0 for r in res)
    assert 0 <= m.collision_rate <= 1


@given(random_results, st.randoms())
def test_metrics_permutation_invariant(res, rnd):
    shuffled = list(res)
    rnd.shuffle(shuffled)
    a, b = compute_metrics(res), compute_metrics(shuffled)
    assert a == b


@given(random_results)
def test_metrics_match_naive_computation(res):
    m = compute_metrics(res)
    sr, spl, cr = naive_metrics(res)
    assert abs(m.SR - sr) <= 1e-12 and abs(m.SPL - spl) <= 1e-12 and abs(m.collision_rate - cr) <= 1e-12


# ---------------------------------------------------------------- ablations

def test_full_ablation_leaves_base_unchanged():
    base = desk_config()
    assert ablation_config(base, "Full") == base


def test_d1_freezes_every_backbone_layer():
    cfg = ablation_config(desk_config(), "D1")
    p = init_params(cfg)
    assert sum(t.data.size for t in p.trainable() if t.name.startswith("bb")) == 0
    assert any(t.name.startswith("head") for t in p.trainable())
    assert any(t.name.startswith("mix") for t in p.trainable())


def test_e1_and_e2_preserve_the_window():
    e1 = ablation_config(Config(), "E1")
    assert (e1.map_resolution, e1.grid_size) == (0.4, 64)
    e2 = ablation_config(Config(), "E2")
    assert (e2.map_resolution, e2.grid_size) == (0.05, 512)
    for c in (e1, e2):
        assert c.grid_size * c.map_resolution == pytest.approx(25.6)


def test_every_id_gives_a_distinct_config():
    base = desk_config()
    hashes = {ablation_config(base, i).hash() for i in ABLATION_IDS}
    assert len(hashes) == len(ABLATION_IDS)
    for i in ABLATION_IDS:
        init_params(ablation_config(base, i))  # all variants build


def test_unknown_ablation_id():
    with pytest.raises(ValueError):
        ablation_config(desk_config(), "Z9")


def test_ablation_settings():
    base = desk_config()
    assert ablation_config(base, "A3").use_goal is False and ablation_config(base, "A3").use_map is False
    assert ablation_config(base, "B1").fusion == "concat" and ablation_config(base, "B2").fusion == "late"
    assert ablation_config(base, "C1").vision_tokens == base.vision_tokens // 4
    assert ablation_config(base, "C2").vision_encoder == "conv"
    assert ablation_config(base, "D2").mixer_layers == 1
    assert ablation_config(base, "F2").data_fraction == 0.25
    assert ablation_config(base, "G1").use_smooth is False and ablation_config(base, "G2").use_collision is False


# ---------------------------------------------------------------- reports

def _row(i, sr=0.5):
    return {"id": i, "SR": sr, "SPL": sr / 2, "collision_rate": 0.1, "seed": 0, "config_hash": "abc"}


def test_single_full_row_has_empty_delta():
    csv_text, md = report_tables([_row("Full")])
    assert csv_text.splitlines()[1].split(",")[1] == ""
    assert "| Full | --- |" in md


def test_rows_sorted_in_table_order():
    csv_text, _ = report_tables([_row("G2"), _row("A1", 0.25), _row("Full")])
    ids = [line.split(",")[0] for line in csv_text.splitlines()[1:]]
    assert ids == ["Full", "A1", "G2"]
    assert csv_text.splitlines()[2].split(",")[1] == "-0.250"


def test_report_header():
    csv_text, _ = report_tables([_row("Full")])
    assert csv_text.splitlines()[0] == "ID,dSR,SR,SPL,collision_rate,seed,config_hash"


def test_config_hash_changes_iff_settings_change():
    a = desk_config()
    assert a.hash() == desk_config().hash()
    assert a.hash() != a.replace(lr=a.lr * 2).hash()
    assert a.replace(lr=a.lr * 2).replace(lr=a.lr).hash() == a.hash()


def test_emit_report_and_episode_log(tmp_path):
    csv_path, md_path = emit_report([_row("Full")], tmp_path)
    assert csv_path.exists() and md_path.exists()
    write_episode_log([result(explanations=[{"available": False}])], tmp_path / "ep.jsonl")
    rec = json.loads((tmp_path / "ep.jsonl").read_text().splitlines()[0])
    assert rec["success"] and rec["explanations"] == [{"available": False}]


def test_metrics_summary_fields():
    m = compute_metrics([result()])
    assert isinstance(m, MetricsSummary) and m.episodes == 1 and math.isclose(m.SPL, 10 / 12)
