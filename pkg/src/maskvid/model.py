"""Asymmetric encoder-decoder over cube tokens.

The encoder sees only visible tokens; the decoder sees the full grid with a
shared learnable token filling masked positions. Positional information is a
fixed 3D separable sin/cos table added before gathering (encoder) and after
scattering (decoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .errors import ConfigError, ContractError, DimensionError
from .masking import MaskMap, apply_mask
from .tensor import Param, Tensor
from .video import CUBE_WIDTH, CubeGrid, TargetCubes, VideoClip, cubify, normalize_cube_targets


@dataclass
class ModelConfig:
    dims: tuple[int, int, int] = (8, 4, 4)  # (T', H', W')
    d_enc: int = 64
    depth_enc: int = 4
    heads_enc: int = 4
    d_dec: int = 32
    depth_dec: int = 2
    heads_dec: int = 2
    mlp_ratio: int = 4
    num_classes: int = 4

    def __post_init__(self):
        if self.d_enc % self.heads_enc != 0:
            raise ConfigError(f"d_enc {self.d_enc} not divisible by heads {self.heads_enc}")
        if self.d_dec % self.heads_dec != 0:
            raise ConfigError(f"d_dec {self.d_dec} not divisible by heads {self.heads_dec}")

    @property
    def n_tokens(self) -> int:
        t, h, w = self.dims
        return t * h * w

    @property
    def spatial_sites(self) -> int:
        return self.dims[1] * self.dims[2]


def desk_config(**overrides) -> ModelConfig:
    """Small config that trains in seconds on one CPU core."""
    return ModelConfig(**overrides)


def vit_base_config() -> ModelConfig:
    """The 16-frame, 224x224 reference geometry: 1568 tokens at width 768."""
    return ModelConfig(dims=(8, 14, 14), d_enc=768, depth_enc=12, heads_enc=12,
                       d_dec=384, depth_dec=4, heads_dec=6, num_classes=4)


# -- positional tables -----------------------------------------------------

def _sincos_1d(positions: np.ndarray, width: int) -> np.ndarray:
    """Interleaved sin/cos codes; row for position 0 is [0, 1, 0, 1, ...]."""
    half = width // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    angles = positions[:, None] * freqs[None, :]
    out = np.zeros((positions.shape[0], width))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def _even_split(width: int) -> tuple[int, int, int]:
    """Width split (t', h', w'): w/4 and two 3w/8 bands, rounded down to even."""
    wt = (width // 4) // 2 * 2
    wh = (3 * width // 8) // 2 * 2
    return wt, wh, wh


def pos_embed_table(dims: tuple[int, int, int], width: int) -> np.ndarray:
    """(T'*H'*W', width) table, row-major (t', h', w'), zero-padded to width."""
    t, h, w = dims
    wt, wh, ww = _even_split(width)
    et = _sincos_1d(np.arange(t), wt)
    eh = _sincos_1d(np.arange(h), wh)
    ew = _sincos_1d(np.arange(w), ww)
    table = np.zeros((t * h * w, width), dtype=np.float64)
    row = 0
    for ti in range(t):
        for hi in range(h):
            for wi in range(w):
                table[row, :wt] = et[ti]
                table[row, wt:wt + wh] = eh[hi]
                table[row, wt + wh:wt + wh + ww] = ew[wi]
                row += 1
    return table


def add_pos_embed(tokens: Tensor, table: np.ndarray) -> Tensor:
    """Add the fixed positional table (constant, no gradient)."""
    return tk.add(tokens, Tensor(table.astype(tokens.dtype)))


# -- parameters --------------------------------------------------------------

class MAEParams:
    """Flat name -> Param mapping plus the constant positional tables."""

    def __init__(self, params: dict[str, Param], config: ModelConfig, dtype=np.float32):
        self.params = params
        self.config = config
        self.pos_enc = pos_embed_table(config.dims, config.d_enc).astype(dtype)
        self.pos_dec = pos_embed_table(config.dims, config.d_dec).astype(dtype)

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def values(self):
        return self.params.values()

    def names(self):
        return list(self.params.keys())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def encoder_params(self) -> list[Param]:
        """Everything used by classify(): embedding + encoder blocks + final norm."""
        keep = ("embed/", "enc/")
        return [p for n, p in self.params.items() if n.startswith(keep)]

    def astype(self, dtype) -> "MAEParams":
        cast = {n: Param(p.value.data.astype(dtype), n, dtype=dtype)
                for n, p in self.params.items()}
        return MAEParams(cast, self.config, dtype=dtype)


def init_mae_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> MAEParams:
    """Truncated normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    p: dict[str, Param] = {}

    def add_param(name, value):
        p[name] = Param(np.asarray(value, dtype=dtype), name, dtype=dtype)

    add_param("embed/w", tk.trunc_normal(rng, (CUBE_WIDTH, config.d_enc), dtype=dtype))
    add_param("embed/b", np.zeros(config.d_enc))
    for i in range(config.depth_enc):
        p.update(tk.init_block_params(config.d_enc, f"enc/block{i}", rng,
                                      mlp_ratio=config.mlp_ratio, dtype=dtype))
    add_param("enc/norm/g", np.ones(config.d_enc))
    add_param("enc/norm/b", np.zeros(config.d_enc))
    add_param("enc2dec/w", tk.trunc_normal(rng, (config.d_enc, config.d_dec), dtype=dtype))
    add_param("enc2dec/b", np.zeros(config.d_dec))
    add_param("mask_token", tk.trunc_normal(rng, (config.d_dec,), dtype=dtype))
    for i in range(config.depth_dec):
        p.update(tk.init_block_params(config.d_dec, f"dec/block{i}", rng,
                                      mlp_ratio=config.mlp_ratio, dtype=dtype))
    add_param("dec/norm/g", np.ones(config.d_dec))
    add_param("dec/norm/b", np.zeros(config.d_dec))
    add_param("out/w", tk.trunc_normal(rng, (config.d_dec, CUBE_WIDTH), dtype=dtype))
    add_param("out/b", np.zeros(CUBE_WIDTH))
    return MAEParams(p, config, dtype=dtype)


def init_head_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Param]:
    """Mean-pool readout: layer-norm + linear classifier."""
    if config.num_classes < 2:
        raise ConfigError(f"classification needs >= 2 classes, got {config.num_classes}")
    rng = np.random.default_rng(seed)
    spec = {
        "head/norm/g": np.ones(config.d_enc, dtype=dtype),
        "head/norm/b": np.zeros(config.d_enc, dtype=dtype),
        "head/w": tk.trunc_normal(rng, (config.d_enc, config.num_classes), dtype=dtype),
        "head/b": np.zeros(config.num_classes, dtype=dtype),
    }
    return {n: Param(v, n, dtype=dtype) for n, v in spec.items()}


# -- forward pieces -----------------------------------------------------------

def cube_embed(tokens: Tensor, params: MAEParams) -> Tensor:
    """Shared linear projection of raw cube rows to encoder width."""
    if tokens.shape[-1] != params["embed/w"].value.shape[0]:
        raise DimensionError(
            f"cube width {tokens.shape[-1]} != embedding input {params['embed/w'].value.shape[0]}"
        )
    return tk.add(tk.matmul(tokens, params["embed/w"].value), params["embed/b"].value)


def encode(visible: Tensor, params: MAEParams) -> Tensor:
    """Encoder blocks over visible tokens, then final layer-norm."""
    if visible.shape[-2] == 0:
        raise ContractError("encoder needs at least one visible token")
    x = visible
    for i in range(params.config.depth_enc):
        x = tk.attention_block(x, params.params, f"enc/block{i}", params.config.heads_enc)
    return tk.layer_norm(x, params["enc/norm/g"].value, params["enc/norm/b"].value)


def decode(encoded: Tensor, visible_indices: np.ndarray, params: MAEParams) -> Tensor:
    """Project to decoder width, scatter with mask tokens, run decoder, project to pixels."""
    cfg = params.config
    x = tk.add(tk.matmul(encoded, params["enc2dec/w"].value), params["enc2dec/b"].value)
    x = tk.scatter_rows(x, visible_indices, params["mask_token"].value, cfg.n_tokens)
    x = add_pos_embed(x, params.pos_dec)
    for i in range(cfg.depth_dec):
        x = tk.attention_block(x, params.params, f"dec/block{i}", cfg.heads_dec)
    x = tk.layer_norm(x, params["dec/norm/g"].value, params["dec/norm/b"].value)
    return tk.add(tk.matmul(x, params["out/w"].value), params["out/b"].value)


@dataclass
class MAEOutput:
    predictions: Tensor       # (T'*S, 1536), rows aligned with the token grid
    masked_indices: np.ndarray
    targets: TargetCubes


def mae_forward(clip: VideoClip, mask: MaskMap, params: MAEParams) -> MAEOutput:
    """cubify -> embed -> pos -> gather visible -> encode -> decode."""
    grid = cubify(clip)
    cfg = params.config
    if grid.dims != cfg.dims:
        raise DimensionError(f"clip grid {grid.dims} != model grid {cfg.dims}")
    if mask.dims != (cfg.dims[0], cfg.spatial_sites):
        raise DimensionError(f"mask dims {mask.dims} != grid {(cfg.dims[0], cfg.spatial_sites)}")
    tokens = Tensor(grid.tokens.astype(params.pos_enc.dtype))
    embedded = add_pos_embed(cube_embed(tokens, params), params.pos_enc)
    visible = tk.gather_rows(embedded, mask.visible_indices)
    encoded = encode(visible, params)
    pred = decode(encoded, mask.visible_indices, params)
    targets = normalize_cube_targets(grid)
    return MAEOutput(pred, mask.masked_indices, targets)


def mae_forward_batch(grids: np.ndarray, visible_indices: np.ndarray,
                      params: MAEParams) -> Tensor:
    """Batched pre-training forward: (B, N, 1536) grids, (B, N_vis) indices."""
    tokens = Tensor(grids)
    embedded = tk.add(cube_embed(tokens, params), Tensor(params.pos_enc))
    visible = tk.gather_rows(embedded, visible_indices)
    encoded = encode(visible, params)
    return decode(encoded, visible_indices, params)


def encode_tokens(grids: np.ndarray, params: MAEParams) -> Tensor:
    """Full-grid (unmasked) encoding used by classification."""
    tokens = Tensor(grids)
    embedded = tk.add(cube_embed(tokens, params), Tensor(params.pos_enc))
    return encode(embedded, params)


def classify(clips, params: MAEParams, head: dict[str, Param]) -> Tensor:
    """Encode all tokens, mean-pool, layer-norm, linear head.

    Accepts one VideoClip or a list; returns (num_classes,) or (B, num_classes).
    """
    single = isinstance(clips, VideoClip)
    clip_list = [clips] if single else list(clips)
    grids = np.stack([cubify(c).tokens for c in clip_list]).astype(params.pos_enc.dtype)
    encoded = encode_tokens(grids, params)
    pooled = tk.mean_axis(encoded, axis=-2)
    normed = tk.layer_norm(pooled, head["head/norm/g"].value, head["head/norm/b"].value)
    logits = tk.add(tk.matmul(normed, head["head/w"].value), head["head/b"].value)
    if single:
        logits = tk.reshape(logits, (params.config.num_classes,))
    return logits
