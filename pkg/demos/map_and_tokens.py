"""Generate a turn scenario, crop its map around the ego pose and count tokens.

Run: python3 demos/map_and_tokens.py
"""
import numpy as np

from goaldrive.config import Config
from goaldrive.encode import Waypoint, encode_goal, encode_map, format_goal_prompt, tokenize_frame
from goaldrive.hdmap import CHANNELS, map_crop
from goaldrive.policy import init_params
from goaldrive.sim import Drive, generate_scenario, render_front_view

sc = generate_scenario(3, "turn")
print(f"{sc.difficulty} ({sc.variant}), goal {sc.goal_distance:.1f} m away, {len(sc.obstacles)} obstacles")

grid = map_crop(sc.map, sc.start, 64, 0.4)
print("set pixels per channel:", {c: int(grid.data[i].sum()) for i, c in enumerate(CHANNELS)})

# coarse text view, one character per 4x2 pixel block: forward is up, the ego sits in the middle
lane = grid.channel("lane").reshape(16, 4, 32, 2).max(axis=(1, 3))
drive = grid.channel("drivable").reshape(16, 4, 32, 2).max(axis=(1, 3))
for r in range(16):
    print("".join("|" if lane[r, c] else "#" if drive[r, c] else "." for c in range(32)))

d = Drive(sc)
wp = d.relative_waypoint()
print("goal prompt:", format_goal_prompt(wp))

cfg = Config()
params = init_params(cfg)
frame = render_front_view(sc.map, sc.obstacles, d.state, d.t)[None]
full = map_crop(sc.map, sc.start, cfg.grid_size, cfg.map_resolution).data[None]
v = tokenize_frame(params, cfg, frame)
m = encode_map(params, cfg, full)
g = encode_goal(params, cfg, np.array([[wp.east, wp.north, wp.yaw]]))
print(f"tokens: vision {len(v)}, map {len(m)}, goal {len(g)}, total {len(v) + len(m) + len(g)}")
print("a waypoint straight ahead reads:", format_goal_prompt(Waypoint(0.0, 10.0, 0.0)))
