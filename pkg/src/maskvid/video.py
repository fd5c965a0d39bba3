"""Clip sampling, cube tokenization, target normalization, synthetic data.

Cubes are fixed at 2x16x16 (time x height x width), so every token is a
1536-wide vector regardless of clip geometry. Flatten order inside a cube is
(channel, time, row, col) and is frozen: checkpoints depend on it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GenerationError, SamplingError

CUBE_T, CUBE_H, CUBE_W = 2, 16, 16
CUBE_WIDTH = 3 * CUBE_T * CUBE_H * CUBE_W  # 1536

DIRECTIONS = ("up", "down", "left", "right")
# per-frame displacement (dy, dx) for each direction label
_VELOCITY = {"up": (-2, 0), "down": (2, 0), "left": (0, -2), "right": (0, 2)}


@dataclass
class VideoClip:
    """Pixel block (3, T, H, W) in [0, 1] plus sampling metadata."""

    pixels: np.ndarray
    stride: int = 1
    start: int = 0

    def __post_init__(self):
        c, t, h, w = self.pixels.shape
        if c != 3:
            raise DimensionError(f"clips are 3-channel, got {c}")
        if t % 2 != 0:
            raise DimensionError(f"frame count must be even, got {t}")
        if h % CUBE_H != 0 or w % CUBE_W != 0:
            raise DimensionError(f"H and W must be divisible by 16, got {h}x{w}")

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        _, t, h, w = self.pixels.shape
        return t // CUBE_T, h // CUBE_H, w // CUBE_W


@dataclass
class CubeGrid:
    """Tokenized clip: (T'*S, 1536) rows in row-major (t', h', w') order."""

    tokens: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self):
        tp, hp, wp = self.dims
        if self.tokens.shape != (tp * hp * wp, CUBE_WIDTH):
            raise DimensionError(
                f"token matrix {self.tokens.shape} inconsistent with dims {self.dims}"
            )

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def spatial_sites(self) -> int:
        return self.dims[1] * self.dims[2]


@dataclass
class TargetCubes:
    """Per-cube standardized pixels plus the statistics to undo it."""

    values: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.stds[:, None] + self.means[:, None]


def sample_clip(video: np.ndarray, mode: str, tau: int, frames: int,
                rng: np.random.Generator | None = None, start: int | None = None) -> VideoClip:
    """Cut a T-frame clip out of a raw (3, N, H, W) frame sequence.

    dense: frames start, start+tau, ..., start+(T-1)*tau.
    uniform: split the video into T equal segments, one random frame each.
    """
    n = video.shape[1]
    if mode == "dense":
        span = (frames - 1) * tau + 1
        if n < span:
            raise SamplingError(f"dense sampling needs {span} frames, video has {n}")
        if start is None:
            start = int(rng.integers(0, n - span + 1)) if rng is not None else 0
        elif start + span > n:
            raise SamplingError(f"start {start} + span {span} exceeds video length {n}")
        idx = start + tau * np.arange(frames)
    elif mode == "uniform":
        if n < frames:
            raise SamplingError(f"uniform sampling needs {frames} frames, video has {n}")
        bounds = np.linspace(0, n, frames + 1)
        if rng is None:
            idx = ((bounds[:-1] + bounds[1:]) / 2).astype(int)
        else:
            idx = np.array([int(rng.integers(int(bounds[i]), max(int(bounds[i]) + 1, int(bounds[i + 1]))))
                            for i in range(frames)])
        start = int(idx[0])
    else:
        raise SamplingError(f"unknown sampling mode {mode!r}")
    return VideoClip(np.ascontiguousarray(video[:, idx]), stride=tau, start=start)


def cubify(clip: VideoClip) -> CubeGrid:
    """Partition a clip into non-overlapping 2x16x16 cubes, flattened per token."""
    tp, hp, wp = clip.grid_dims
    px = clip.pixels  # (3, T, H, W)
    x = px.reshape(3, tp, CUBE_T, hp, CUBE_H, wp, CUBE_W)
    # token-major (t', h', w'), cube-internal (channel, time, row, col)
    x = x.transpose(1, 3, 5, 0, 2, 4, 6)
    tokens = np.ascontiguousarray(x.reshape(tp * hp * wp, CUBE_WIDTH))
    return CubeGrid(tokens, (tp, hp, wp))


def decubify(grid: CubeGrid) -> VideoClip:
    """Exact inverse of cubify."""
    tp, hp, wp = grid.dims
    x = grid.tokens.reshape(tp, hp, wp, 3, CUBE_T, CUBE_H, CUBE_W)
    x = x.transpose(3, 0, 4, 1, 5, 2, 6)
    pixels = np.ascontiguousarray(x.reshape(3, tp * CUBE_T, hp * CUBE_H, wp * CUBE_W))
    return VideoClip(pixels)


def normalize_cube_targets(grid: CubeGrid, eps: float = 1e-6) -> TargetCubes:
    """Standardize each cube with its own mean and std (std + eps in the divisor)."""
    # float64 statistics: with float32 accumulation a constant cube has
    # rounding noise in the numerator that the eps divisor amplifies ~100x
    means = grid.tokens.mean(axis=1, dtype=np.float64).astype(grid.tokens.dtype)
    stds = grid.tokens.astype(np.float64).std(axis=1).astype(grid.tokens.dtype)
    values = (grid.tokens - means[:, None]) / (stds[:, None] + eps)
    return TargetCubes(values.astype(grid.tokens.dtype), means, stds)


@dataclass
class SpriteDataset:
    """Class-balanced moving-sprite clips with motion-direction labels."""

    clips: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    seed: int = 0
    classes: tuple = DIRECTIONS

    def __len__(self):
        return len(self.clips)

    def __getitem__(self, i):
        return self.clips[i], self.labels[i]

    def subset(self, indices) -> "SpriteDataset":
        return SpriteDataset([self.clips[i] for i in indices],
                             [self.labels[i] for i in indices],
                             seed=self.seed, classes=self.classes)


def synth_moving_sprites(seed: int, count: int, classes=DIRECTIONS,
                         size: tuple[int, int, int] = (16, 64, 64),
                         sprite_extent: int = 12, noise_level: float = 0.2) -> SpriteDataset:
    """One bright sprite translating at constant velocity over a dark noise field.

    Deterministic in `seed`; clip i uses a child seed derived from (seed, i),
    so generation can be sharded by index without changing the output.
    """
    t, h, w = size
    if count % len(classes) != 0:
        raise GenerationError(f"count {count} is not divisible by {len(classes)} classes")
    clips, labels = [], []
    for i in range(count):
        label = i % len(classes)
        direction = classes[label]
        dy, dx = _VELOCITY[direction]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        span_y, span_x = abs(dy) * (t - 1), abs(dx) * (t - 1)
        max_y, max_x = h - sprite_extent - span_y, w - sprite_extent - span_x
        if max_y < 0 or max_x < 0:
            raise GenerationError(
                f"sprite of extent {sprite_extent} moving {direction} leaves a {h}x{w} frame"
            )
        y0 = int(rng.integers(0, max_y + 1)) + (span_y if dy < 0 else 0)
        x0 = int(rng.integers(0, max_x + 1)) + (span_x if dx < 0 else 0)
        brightness = 0.8 + 0.2 * rng.random(3)
        pixels = (noise_level * rng.random((3, t, h, w))).astype(np.float32)
        for f in range(t):
            y, x = y0 + dy * f, x0 + dx * f
            for c in range(3):
                pixels[c, f, y:y + sprite_extent, x:x + sprite_extent] = brightness[c]
        clips.append(VideoClip(pixels))
        labels.append(label)
    return SpriteDataset(clips, labels, seed=seed, classes=tuple(classes))


# -- raw clip file format ------------------------------------------------------
# Headerless little-endian float32 in (C, T, H, W) order, with a plain-text
# sidecar manifest (key=value: channels, frames, height, width).

def write_raw_clip(clip: VideoClip, path: str):
    c, t, h, w = clip.pixels.shape
    clip.pixels.astype("<f4").tofile(path)
    with open(path + ".manifest", "w") as fh:
        fh.write(f"channels={c}\nframes={t}\nheight={h}\nwidth={w}\n")


def read_raw_clip(path: str) -> VideoClip:
    manifest_path = path + ".manifest"
    if not os.path.exists(manifest_path):
        raise SamplingError(f"missing sidecar manifest {manifest_path}")
    meta = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, val = line.partition("=")
                meta[key] = int(val)
    shape = (meta["channels"], meta["frames"], meta["height"], meta["width"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DimensionError(
            f"raw file holds {data.size} floats, manifest implies {int(np.prod(shape))}"
        )
    return VideoClip(data.reshape(shape))
