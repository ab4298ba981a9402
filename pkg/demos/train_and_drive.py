"""Train a small policy on a handful of expert demos, then drive held-out scenarios.

Takes a few minutes on one core. Run: python3 demos/train_and_drive.py
"""
import json

from goaldrive.bench import ExpertPolicy, compute_metrics, named_suite, run_episodes, training_scenarios
from goaldrive.config import desk_config
from goaldrive.policy import ModelPolicy, init_params
from goaldrive.training import collect_demo, train

cfg = desk_config(train_scenarios=12, epochs=10)
train_set = training_scenarios(cfg)
demos = [collect_demo(sc, cfg.demo_noise, seed=sc.seed) for sc in train_set]
print(f"{len(demos)} demos, {sum(len(d) for d in demos)} labelled steps")

params = init_params(cfg)
result = train(params, cfg, demos, log=lambda e, bd: print(f"epoch {e:2d}  loss {bd.total:.5f}"))

held_out = named_suite("straight_turn", cfg.seed, 20)
for name, policy in (("expert", ExpertPolicy()), ("model", ModelPolicy(params, cfg))):
    m = compute_metrics(run_episodes(policy, held_out))
    print(f"{name:6s} SR {m.SR:.2f}  SPL {m.SPL:.2f}  collision rate {m.collision_rate:.2f}")

r = run_episodes(ModelPolicy(params, cfg), held_out[:1], explain=True)[0]
print("first explanation record:")
print(json.dumps(r.explanations[0], indent=1)[:800])
