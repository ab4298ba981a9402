"""Goal-query cross-attention mixer, partially frozen transformer and action head."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Config
from .encode import TokenSequence, encode_goal, encode_map, format_goal_prompt, init_encoder_params, tokenize_frame
from .numerics import Params, Tensor
from .sim import Action, EgoState, check_collision, rollout

__all__ = ["Action", "EgoState", "init_params", "mixer_forward", "assemble_sequence", "backbone_forward",
           "decode_action", "forward", "explain", "safety_override", "ModelPolicy", "save_checkpoint",
           "load_checkpoint", "CheckpointError"]

CHECKPOINT_VERSION = 1
TOP_K = 5


class CheckpointError(ValueError):
    pass


def _w(rng, fan_in, shape, gain=1.0):
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


def _add_attn(params: Params, rng, prefix: str, d: int, frozen: bool, out_gain: float):
    for nm in ("Wq", "Wk", "Wv"):
        params.add(f"{prefix}.{nm}", _w(rng, d, (d, d)), frozen)
    params.add(f"{prefix}.Wo", _w(rng, d, (d, d), out_gain), frozen)


def _add_mlp(params: Params, rng, prefix: str, d: int, hidden: int, frozen: bool, out_gain: float):
    params.add(f"{prefix}.W1", _w(rng, d, (d, hidden)), frozen)
    params.add(f"{prefix}.b1", np.zeros((1, hidden)), frozen)
    params.add(f"{prefix}.W2", _w(rng, hidden, (hidden, d), out_gain), frozen)
    params.add(f"{prefix}.b2", np.zeros((1, d)), frozen)


def _add_ln(params: Params, prefix: str, d: int, frozen: bool = False):
    params.add(f"{prefix}.g", np.ones((1, d)), frozen)
    params.add(f"{prefix}.b", np.zeros((1, d)), frozen)


def init_params(cfg: Config, seed: int | None = None) -> Params:
    """Randomly initialised weights; backbone layers below ``frozen_layers`` are frozen."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d = cfg.d_model
    params = Params()
    init_encoder_params(params, cfg, rng)
    out_gain = 0.5
    if cfg.fusion == "cross_attn":
        for layer in range(cfg.mixer_layers):
            pre = f"mix{layer}"
            _add_ln(params, f"{pre}.ln_q", d)
            _add_ln(params, f"{pre}.ln_kv", d)
            _add_attn(params, rng, f"{pre}.attn", d, False, out_gain)
            _add_ln(params, f"{pre}.ln_mlp", d)
            _add_mlp(params, rng, f"{pre}.mlp", d, cfg.mlp_ratio * d, False, out_gain)
    params.add("tok.act", rng.normal(0.0, 0.1, (1, d)))
    params.add("tok.reason", rng.normal(0.0, 0.1, (1, d)))
    for layer in range(cfg.backbone_layers):
        frozen = layer < cfg.frozen_layers
        pre = f"bb{layer}"
        _add_ln(params, f"{pre}.ln1", d, frozen)
        _add_attn(params, rng, f"{pre}.attn", d, frozen, out_gain)
        _add_ln(params, f"{pre}.ln2", d, frozen)
        _add_mlp(params, rng, f"{pre}.mlp", d, cfg.mlp_ratio * d, frozen, out_gain)
    d_in = 2 * d if cfg.fusion == "late" else d
    _add_ln(params, "head.ln", d_in)
    params.add("head.W1", _w(rng, d_in, (d_in, 2 * d)))
    params.add("head.b1", np.zeros((1, 2 * d)))
    params.add("head.W2", _w(rng, 2 * d, (2 * d, 2), 0.1))
    params.add("head.b2", np.zeros((1, 2)))
    return params


def _ln(x, params, prefix):
    return nx.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _mlp(x, params, prefix):
    h = nx.gelu(nx.add_row(nx.matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    return nx.add_row(nx.matmul(h, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])


def _attn(xq, xkv, params, prefix, heads, groups):
    q = nx.matmul(xq, params[f"{prefix}.Wq"])
    k = nx.matmul(xkv, params[f"{prefix}.Wk"])
    v = nx.matmul(xkv, params[f"{prefix}.Wv"])
    o, P = nx.multihead_attention(q, k, v, heads, groups)
    return nx.matmul(o, params[f"{prefix}.Wo"]), P


def _interleave(parts: list[TokenSequence]) -> TokenSequence:
    """Stack per-modality blocks (each sample-major) into one sample-major sequence."""
    B = parts[0].batch
    lens = [len(p) for p in parts]
    stacked = nx.concat_rows([p.tokens for p in parts])
    offsets = np.cumsum([0] + [B * n for n in lens])
    order = np.concatenate([np.arange(off + b * n, off + (b + 1) * n)
                            for b in range(B) for off, n in zip(offsets[:-1], lens)])
    tags = [t for p in parts for t in p.tags]
    return TokenSequence(nx.take_rows(stacked, order), tags, B)


def mixer_forward(params: Params, cfg: Config, goal: TokenSequence, vision: TokenSequence,
                  map_tokens: TokenSequence | None):
    """Goal tokens attend to [vision; map]; returns (refined goal tokens, final-layer weights).

    Weights have shape (B, heads, 8, N_kv).
    """
    kv = _interleave([vision, map_tokens]) if map_tokens is not None and len(map_tokens) else vision
    for seq in (vision, map_tokens):
        if seq is not None and seq.tokens.cols != goal.tokens.cols:
            raise nx.ShapeError(f"token width {seq.tokens.cols} != goal width {goal.tokens.cols}")
    x = goal.tokens
    P = None
    for layer in range(cfg.mixer_layers):
        pre = f"mix{layer}"
        a, P = _attn(_ln(x, params, f"{pre}.ln_q"), _ln(kv.tokens, params, f"{pre}.ln_kv"),
                     params, f"{pre}.attn", cfg.heads, goal.batch)
        x = nx.add(x, a)
        x = nx.add(x, _mlp(_ln(x, params, f"{pre}.ln_mlp"), params, f"{pre}.mlp"))
    return TokenSequence(x, list(goal.tags), goal.batch), P


def _special(params: Params, name: str, B: int) -> TokenSequence:
    return TokenSequence(nx.tile_rows(params[f"tok.{name}"], B), [name], B)


def assemble_sequence(params: Params, vision: TokenSequence, map_tokens: TokenSequence | None,
                      goal: TokenSequence, mode: str) -> TokenSequence:
    """[vision | map | goal | act | reason]; late mode leaves the map out."""
    B = vision.batch
    parts = [vision]
    if mode != "late" and map_tokens is not None and len(map_tokens):
        parts.append(map_tokens)
    parts += [goal, _special(params, "act", B), _special(params, "reason", B)]
    return _interleave(parts)


def backbone_forward(params: Params, cfg: Config, seq: TokenSequence, act_only: bool = False) -> Tensor:
    """Bidirectional pre-norm transformer over the fused sequence.

    With ``act_only`` the last layer is evaluated for the act rows alone,
    which is all the head reads; earlier layers are unchanged.
    """
    x = seq.tokens
    B, N = seq.batch, len(seq)
    act_pos = seq.tags.index("act")
    for layer in range(cfg.backbone_layers):
        pre = f"bb{layer}"
        h = _ln(x, params, f"{pre}.ln1")
        if act_only and layer == cfg.backbone_layers - 1:
            rows = np.arange(B) * N + act_pos
            x = nx.take_rows(x, rows)
            a, _ = _attn(nx.take_rows(h, rows), h, params, f"{pre}.attn", cfg.heads, B)
        else:
            a, _ = _attn(h, h, params, f"{pre}.attn", cfg.heads, B)
        x = nx.add(x, a)
        x = nx.add(x, _mlp(_ln(x, params, f"{pre}.ln2"), params, f"{pre}.mlp"))
    if act_only and cfg.backbone_layers == 0:
        x = nx.take_rows(x, np.arange(B) * N + act_pos)
    return x


def _squash(z: Tensor) -> Tensor:
    """Column 0 -> tanh (steering), column 1 -> logistic (speed)."""
    s = np.tanh(z.data[:, 0])
    v = 0.5 * (1.0 + np.tanh(0.5 * z.data[:, 1]))
    out = np.stack([s, v], axis=1)

    def bw(g):
        return [np.stack([g[:, 0] * (1.0 - s * s), g[:, 1] * v * (1.0 - v)], axis=1)]

    return nx.custom_op(out, [z], bw, op="squash")


def decode_action(params: Params, act_hidden: Tensor, pooled_map: Tensor | None = None) -> Tensor:
    """(B, d) act states [+ (B, d) pooled map] -> (B, 2) [steering, speed]."""
    h = act_hidden if pooled_map is None else nx.concat_cols([act_hidden, pooled_map])
    h = _ln(h, params, "head.ln")
    z = _mlp(h, params, "head")
    return _squash(z)


def forward(params: Params, cfg: Config, frames, grids, waypoints):
    """Batched policy forward. Returns ((B, 2) action tensor, final mixer attention or None)."""
    vision = tokenize_frame(params, cfg, frames)
    B = vision.batch
    map_tokens = encode_map(params, cfg, grids) if cfg.use_map else None
    goal = encode_goal(params, cfg, waypoints)
    P = None
    if cfg.fusion == "cross_attn":
        goal, P = mixer_forward(params, cfg, goal, vision, map_tokens)
    seq = assemble_sequence(params, vision, map_tokens, goal, cfg.fusion)
    act = backbone_forward(params, cfg, seq, act_only=True)
    pooled = None
    if cfg.fusion == "late":
        pooled = (nx.group_mean_rows(map_tokens.tokens, B) if map_tokens is not None
                  else Tensor(np.zeros((B, cfg.d_model))))
    return decode_action(params, act, pooled), P


def explain(cfg: Config, attention, prompt: str, k: int = TOP_K) -> dict:
    """Top-k vision and map patches by mean goal attention in the last mixer layer.

    ``attention`` is one sample's (heads, 8, N_kv) weights, or None when the
    mixer did not run.
    """
    if attention is None or cfg.fusion != "cross_attn":
        return {"available": False, "goal_prompt": prompt}
    w = np.asarray(attention).mean(axis=(0, 1))
    nv = cfg.vision_tokens
    rec = {"available": True, "goal_prompt": prompt}
    for name, part in (("vision", w[:nv]), ("map", w[nv:])):
        order = np.argsort(-part, kind="stable")[:k]
        rec[name] = [{"patch": int(i), "weight": float(part[i])} for i in order]
    return rec


def safety_override(action: Action, state: EgoState, obstacles, t: float = 0.0):
    """Zero the speed if the 2 s constant-action rollout touches an obstacle."""
    times, poses = rollout(state, action)
    hit, _ = check_collision(times, poses, obstacles, t0=t)
    if hit:
        return Action(action.steering, 0.0), True
    return action, False


class ModelPolicy:
    """Inference wrapper; parameters are read-only here."""

    def __init__(self, params: Params, cfg: Config):
        self.params = params
        self.cfg = cfg

    def act_batch(self, frames, grids, waypoints, with_explanation: bool = False):
        wps = np.stack([w.as_array() for w in waypoints])
        out, P = forward(self.params, self.cfg, frames, grids, wps)
        actions = [Action(float(s), float(v)) for s, v in out.data]
        if not with_explanation:
            return actions, None
        recs = [explain(self.cfg, None if P is None else P[b], format_goal_prompt(w))
                for b, w in enumerate(waypoints)]
        return actions, recs

    def act(self, frame, grid, waypoint) -> Action:
        actions, _ = self.act_batch(frame[None], grid[None], [waypoint])
        return actions[0]


def save_checkpoint(params: Params, cfg: Config, path) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "model_hash": cfg.model_hash(),
        "config": cfg.model_dict(),
        "params": [{"name": t.name, "shape": list(t.shape), "frozen": not t.requires_grad} for t in params],
    }
    arrays = {f"p{i}": t.data for i, t in enumerate(params)}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path, cfg: Config) -> Params:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        if header["model_hash"] != cfg.model_hash():
            raise CheckpointError(f"checkpoint model hash {header['model_hash']} != config {cfg.model_hash()}")
        params = init_params(cfg)
        for i, meta in enumerate(header["params"]):
            t = params[meta["name"]]
            arr = z[f"p{i}"]
            if list(arr.shape) != list(t.shape) or meta["frozen"] == t.requires_grad:
                raise CheckpointError(f"parameter {meta['name']} does not match the config")
            t.data[...] = arr
    return params
