"""Full throttle towards a wall, with and without the safety override.

Run: python3 demos/safety_monitor.py
"""
import numpy as np

from goaldrive.bench import ConstantPolicy, run_episode
from goaldrive.hdmap import Pose
from goaldrive.sim import Action, Obstacle, Route, Scenario, _road_map

center = np.array([[0.0, 0.0], [60.0, 0.0]])
wall = Obstacle(25.5, 0.0, 0.0, 1.0, 8.0)
sc = Scenario(_road_map(center, 3.5), Pose(0.0, 0.0, 0.0), Route(center), np.array([[60.0, 0.0, 0.0]]),
              np.array([60.0]), [wall], 20.0, 0, "straight", "", 60.0)

policy = ConstantPolicy(Action(0.0, 1.0))
for monitor in (False, True):
    r = run_episode(policy, sc, monitor=monitor)
    outcome = "collided" if r.collided else "timed out" if r.timeout else "arrived" if r.success else "stopped"
    print(f"monitor {'on ' if monitor else 'off'}: {outcome} after {r.steps} steps, "
          f"{r.L_agent:.1f} m driven, {r.override_count} overrides")
