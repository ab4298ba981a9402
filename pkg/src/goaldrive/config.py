"""Flat run configuration shared by the model, trainer and benchmark."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

FUSION_MODES = ("cross_attn", "concat", "late")


@dataclass(frozen=True)
class Config:
    # model
    d_model: int = 64
    heads: int = 4
    frame_size: int = 64
    patch_vision: int = 8
    vision_encoder: str = "linear"  # or "conv"
    grid_size: int = 256
    map_resolution: float = 0.1
    patch_map: int = 16
    goal_tokens: int = 8
    mixer_layers: int = 3
    backbone_layers: int = 4
    frozen_layers: int = 2
    mlp_ratio: int = 4
    fusion: str = "cross_attn"
    use_goal: bool = True
    use_map: bool = True
    # training
    seed: int = 0
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    window: int = 4
    data_fraction: float = 1.0
    use_smooth: bool = True
    use_collision: bool = True
    collision_mode: str = "soft"
    # data and evaluation
    ablation: str = "Full"
    train_scenarios: int = 60
    eval_episodes: int = 200
    demo_noise: float = 0.15
    monitor: bool = True

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.vision_encoder not in ("linear", "conv"):
            raise ValueError(f"unknown vision encoder {self.vision_encoder!r}")
        if self.goal_tokens != 8:
            raise ValueError("goal_tokens is fixed at 8")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 0 <= self.frozen_layers <= self.backbone_layers:
            raise ValueError("frozen_layers must lie in [0, backbone_layers]")
        if self.frame_size % self.patch_vision or self.grid_size % self.patch_map:
            raise ValueError("patch sizes must divide the frame and grid sizes")
        if self.collision_mode not in ("soft", "fixed"):
            raise ValueError(f"unknown collision mode {self.collision_mode!r}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")

    @property
    def vision_tokens(self) -> int:
        return (self.frame_size // self.patch_vision) ** 2

    @property
    def map_tokens(self) -> int:
        return (self.grid_size // self.patch_map) ** 2 if self.use_map else 0

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def model_dict(self) -> dict:
        """Settings that determine parameter shapes and the forward graph."""
        keys = ("d_model", "heads", "frame_size", "patch_vision", "vision_encoder", "grid_size",
                "patch_map", "goal_tokens", "mixer_layers", "backbone_layers", "frozen_layers",
                "mlp_ratio", "fusion", "use_goal", "use_map")
        return {k: getattr(self, k) for k in keys}

    def model_hash(self) -> str:
        blob = json.dumps(self.model_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path) -> Config:
    doc = json.loads(Path(path).read_text())
    known = {f.name for f in dataclasses.fields(Config)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return Config(**doc)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def desk_config(**overrides) -> Config:
    """Reduced preset used by the command line and the benchmark runs.

    16 vision tokens (patch 16), 16 map tokens (patch 64) and d = 32 keep a
    full train + 200-episode evaluation within minutes on one CPU core.
    """
    base = dict(d_model=32, patch_vision=16, patch_map=64, batch_size=8, epochs=12, train_scenarios=30)
    base.update(overrides)
    return Config(**base)
