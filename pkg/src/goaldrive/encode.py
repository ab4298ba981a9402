"""Tokenizers for the camera frame, the BEV raster and the waypoint prompt.

All three produce d-dimensional rows in one shared space. Inputs are
batched: B samples produce B * N stacked token rows.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import Config
from .numerics import Params, Tensor

TAGS = ("vision", "map", "goal", "act", "reason")
GOAL_FIELDS = ("east", "north", "yaw")
N_FREQ = 8
# wavelengths (m) for the two position fields
_WAVELENGTHS = 2.0 * 2.0 ** np.arange(N_FREQ)


@dataclass(frozen=True)
class Waypoint:
    """Next waypoint relative to the ego vehicle (north = forward, east = right)."""

    east: float
    north: float
    yaw: float  # degrees in (-180, 180]

    def __post_init__(self):
        for name in ("east", "north", "yaw"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"waypoint {name} must be finite")
        y = (self.yaw + 180.0) % 360.0 - 180.0
        object.__setattr__(self, "yaw", 180.0 if y == -180.0 else y)

    @property
    def yaw_rad(self) -> float:
        return math.radians(self.yaw)

    def as_array(self) -> np.ndarray:
        """[east m, north m, yaw rad]; the only degree->radian conversion point."""
        return np.array([self.east, self.north, self.yaw_rad])


@dataclass
class TokenSequence:
    tokens: Tensor  # (batch * len(tags)) x d
    tags: list[str]
    batch: int = 1

    def __post_init__(self):
        if self.tokens.rows != self.batch * len(self.tags):
            raise nx.ShapeError(f"{self.tokens.rows} token rows for {self.batch} x {len(self.tags)} tags")

    def __len__(self) -> int:
        return len(self.tags)


def _fmt(v: float) -> str:
    s = f"{v:.1f}"
    return "0.0" if s == "-0.0" else s


def format_goal_prompt(wp: Waypoint) -> str:
    return f"<goal> east={_fmt(wp.east)}m, north={_fmt(wp.north)}m, yaw={_fmt(wp.yaw)}° </goal>"


_PROMPT_RE = re.compile(
    r"^<goal> east=(-?\d+\.\d)m, north=(-?\d+\.\d)m, yaw=(-?\d+\.\d)° </goal>$")


def parse_goal_prompt(text: str) -> Waypoint:
    m = _PROMPT_RE.match(text)
    if not m:
        raise ValueError(f"not a goal prompt: {text!r}")
    return Waypoint(*(float(g) for g in m.groups()))


def fourier_features(values: np.ndarray, field: str) -> np.ndarray:
    """(B,) scalars -> (B, 16) [sin w_1 x, cos w_1 x, ..., sin w_8 x, cos w_8 x]."""
    values = np.asarray(values, dtype=float)
    if field == "yaw":
        w = np.arange(1, N_FREQ + 1, dtype=float)  # integer harmonics keep yaw periodic
    else:
        w = 2 * np.pi / _WAVELENGTHS
    phase = values[:, None] * w[None, :]
    out = np.empty((len(values), 2 * N_FREQ))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B * H/p * W/p, p*p*C), patches in row-major order."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise nx.ShapeError(f"image {H}x{W} is not divisible by patch {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (H // patch) * (W // patch), patch * patch * C)


def _init(rng, fan_in, shape):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def init_encoder_params(params: Params, cfg: Config, rng: np.random.Generator) -> None:
    d = cfg.d_model
    p = cfg.patch_vision
    nv = cfg.vision_tokens
    if cfg.vision_encoder == "linear":
        params.add("vis.W", _init(rng, p * p * 3, (p * p * 3, d)))
        params.add("vis.b", np.zeros((1, d)))
    else:
        h = d // 2
        q = p // 2
        params.add("vis.conv1.W", _init(rng, q * q * 3, (q * q * 3, h)))
        params.add("vis.conv1.b", np.zeros((1, h)))
        params.add("vis.conv2.W", _init(rng, 4 * h, (4 * h, d)))
        params.add("vis.conv2.b", np.zeros((1, d)))
    params.add("vis.pos", rng.normal(0.0, 0.1, (nv, d)))
    if cfg.use_map:
        pm = cfg.patch_map
        params.add("map.W", _init(rng, pm * pm * 4, (pm * pm * 4, d)))
        params.add("map.b", np.zeros((1, d)))
        params.add("map.pos", rng.normal(0.0, 0.1, (cfg.map_tokens, d)))
    if cfg.use_goal:
        params.add("goal.open", rng.normal(0.0, 0.1, (1, d)))
        params.add("goal.close", rng.normal(0.0, 0.1, (1, d)))
        for slot in range(6):
            params.add(f"goal.slot{slot}.E", rng.normal(0.0, 0.1, (1, d)))
            params.add(f"goal.slot{slot}.W", _init(rng, 2 * N_FREQ, (2 * N_FREQ, d)))
    else:
        params.add("goal.null", rng.normal(0.0, 0.1, (8, d)))


def tokenize_frame(params: Params, cfg: Config, frames: np.ndarray) -> TokenSequence:
    """(B, H, W, 3) frames in [0,1] (or uint8 0..255) -> vision tokens."""
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        frames = frames / 255.0
    B = frames.shape[0]
    p = cfg.patch_vision
    if cfg.vision_encoder == "linear":
        x = Tensor(patchify(frames, p))
        tok = nx.add_row(nx.matmul(x, params["vis.W"]), params["vis.b"])
    else:
        # two stride=kernel convolutions: p/2 sub-patches, then 2x2 of them
        q = p // 2
        H, W = frames.shape[1:3]
        sub = frames.reshape(B, H // p, 2, q, W // p, 2, q, 3).transpose(0, 1, 4, 2, 5, 3, 6, 7)
        x = Tensor(sub.reshape(-1, q * q * 3))
        h = nx.gelu(nx.add_row(nx.matmul(x, params["vis.conv1.W"]), params["vis.conv1.b"]))
        h = nx.reshape(h, h.rows // 4, h.cols * 4)
        tok = nx.add_row(nx.matmul(h, params["vis.conv2.W"]), params["vis.conv2.b"])
    n = tok.rows // B
    tok = nx.add(tok, nx.tile_rows(params["vis.pos"], B))
    return TokenSequence(tok, ["vision"] * n, B)


def encode_map(params: Params, cfg: Config, grids: np.ndarray) -> TokenSequence:
    """(B, 4, S, S) binary rasters -> map tokens."""
    grids = np.asarray(grids)
    B = grids.shape[0]
    # patchify on the compact dtype, convert once
    x = Tensor(patchify(grids.transpose(0, 2, 3, 1), cfg.patch_map))
    tok = nx.add_row(nx.matmul(x, params["map.W"]), params["map.b"])
    tok = nx.add(tok, nx.tile_rows(params["map.pos"], B))
    return TokenSequence(tok, ["map"] * (tok.rows // B), B)


def encode_goal(params: Params, cfg: Config, waypoints: np.ndarray) -> TokenSequence:
    """(B, 3) [east, north, yaw_rad] -> 8 goal tokens per sample.

    Slot layout: <goal>, east x2, north x2, yaw x2, </goal>.
    """
    waypoints = np.atleast_2d(np.asarray(waypoints, dtype=float))
    B = waypoints.shape[0]
    if not cfg.use_goal:
        return TokenSequence(nx.tile_rows(params["goal.null"], B), ["goal"] * 8, B)
    parts = [nx.tile_rows(params["goal.open"], B)]
    for f, field in enumerate(GOAL_FIELDS):
        feats = Tensor(fourier_features(waypoints[:, f], field))
        for j in range(2):
            slot = 2 * f + j
            parts.append(nx.add_row(nx.matmul(feats, params[f"goal.slot{slot}.W"]), params[f"goal.slot{slot}.E"]))
    parts.append(nx.tile_rows(params["goal.close"], B))
    stacked = nx.concat_rows(parts)  # slot-major: row = slot * B + b
    order = (np.arange(8)[None, :] * B + np.arange(B)[:, None]).reshape(-1)
    return TokenSequence(nx.take_rows(stacked, order), ["goal"] * 8, B)
