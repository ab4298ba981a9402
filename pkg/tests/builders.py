"""Hand-built scenarios for targeted tests."""
import numpy as np

from goaldrive.hdmap import Pose
from goaldrive.sim import Obstacle, Route, Scenario, _road_map


def straight_road(length=60.0, obstacles=(), budget=30.0, seed=0):
    center = np.array([[0.0, 0.0], [length, 0.0]])
    return Scenario(_road_map(center, 3.5), Pose(0.0, 0.0, 0.0), Route(center), np.array([[length, 0.0, 0.0]]),
                    np.array([length]), list(obstacles), budget, seed, "straight", "", length)


def wall_scenario(distance=25.0):
    """Straight road blocked by a wall spanning the full width."""
    wall = Obstacle(distance + 0.5, 0.0, 0.0, 1.0, 8.0)
    return straight_road(60.0, [wall], budget=20.0)
