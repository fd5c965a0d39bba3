"""Desk-scale ablation harness: masking strategy, ratio, decoder depth, data size.

Each cell is pretrain -> finetune on the moving-sprites dataset, repeated over
seeds. Claims about orderings are made on means across seeds, never single
runs; absolute accuracies are not comparable to any large-scale result.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .masking import make_mask, leakage_probe
from .model import ModelConfig, init_mae_params
from .training import TrainConfig, finetune, pretrain, params_from_checkpoint
from .video import synth_moving_sprites

REPORT_FIELDS = ("axis", "value", "seed", "accuracy", "final_pretrain_loss",
                 "leakage", "visible_tokens", "wall_seconds")


@dataclass
class AblationSpec:
    axis: str  # strategy | ratio | decoder_depth | dataset_fraction
    values: list
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    model_cfg: ModelConfig = field(default_factory=lambda: ModelConfig(dims=(8, 5, 5)))
    pretrain_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="pretrain", total_steps=2000, base_lr=0.64, batch_size=4))
    finetune_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="finetune", beta2=0.999, total_steps=200, base_lr=0.256,
        batch_size=4, weight_decay=0.0))
    data_seed: int = 0
    # noise-free sprites: with a noisy background the per-cube target
    # normalization amplifies noise into full-variance targets that a
    # desk-scale decoder cannot fit, drowning the strategy signal
    noise_level: float = 0.0
    # a 24px sprite keeps each spatial site's content stable for most of the
    # clip, which is what separates tube masking from frame and random
    sprite_extent: int = 24
    pretrain_clips: int = 16
    label_clips: int = 4
    eval_clips: int = 64
    regime: str = "same_epochs"  # same_epochs | same_iterations (dataset_fraction axis)

    def __post_init__(self):
        if len(self.values) < 1:
            raise ConfigError("ablation grid needs at least one value")
        if self.regime not in ("same_epochs", "same_iterations"):
            raise ConfigError(f"unknown regime {self.regime!r}")


@dataclass
class ReportRow:
    axis: str
    value: object
    seed: int
    accuracy: float
    final_pretrain_loss: float
    leakage: float
    visible_tokens: int
    wall_seconds: float

    def as_record(self) -> dict:
        return {f: getattr(self, f) for f in REPORT_FIELDS}


def _clip_size(model_cfg: ModelConfig) -> tuple[int, int, int]:
    t, h, w = model_cfg.dims
    return t * 2, h * 16, w * 16


def _datasets(spec: AblationSpec, pretrain_clips: int | None = None):
    size = _clip_size(spec.model_cfg)
    n_pre = pretrain_clips or spec.pretrain_clips
    kw = dict(size=size, noise_level=spec.noise_level,
              sprite_extent=spec.sprite_extent)
    pre = synth_moving_sprites(spec.data_seed, n_pre, **kw)
    train = synth_moving_sprites(spec.data_seed + 1, spec.label_clips, **kw)
    eval_ds = synth_moving_sprites(spec.data_seed + 2, spec.eval_clips, **kw)
    return pre, train, eval_ds


def _mean_leakage(strategy: str, dims, ratio: float, n: int = 200) -> float:
    rng = np.random.default_rng(0)
    return float(np.mean([leakage_probe(make_mask(strategy, dims, ratio, rng))
                          for _ in range(n)]))


def _run_cell(spec: AblationSpec, value, seed: int, pretrain_cfg: TrainConfig,
              model_cfg: ModelConfig, pre_ds, train_ds, eval_ds) -> ReportRow:
    t0 = time.perf_counter()
    result = pretrain(pretrain_cfg, pre_ds, model_cfg=model_cfg)
    params = params_from_checkpoint(result.checkpoint)
    ft_cfg = replace(spec.finetune_cfg, seed=seed)
    ft = finetune(params, train_ds, eval_ds, ft_cfg)
    wall = time.perf_counter() - t0
    dims = (model_cfg.dims[0], model_cfg.spatial_sites)
    leak = _mean_leakage(pretrain_cfg.mask_strategy, dims, pretrain_cfg.mask_ratio)
    probe_mask = make_mask(pretrain_cfg.mask_strategy, dims,
                           pretrain_cfg.mask_ratio, np.random.default_rng(0))
    final_loss = result.trace[-1][2] if result.trace else float("nan")
    return ReportRow(spec.axis, value, seed, ft.accuracy, final_loss, leak,
                     probe_mask.n_visible, wall)


def run_strategy_ablation(spec: AblationSpec) -> list[ReportRow]:
    """Compare masking strategies at (near-)equal ratio budgets."""
    pre_ds, train_ds, eval_ds = _datasets(spec)
    rows = []
    for value in spec.values:
        if isinstance(value, tuple):
            strategy, ratio = value
        else:
            strategy, ratio = value, spec.pretrain_cfg.mask_ratio
        if strategy == "frame":
            # nearest achievable ratio on this grid: whole slices, >=1 visible
            t = spec.model_cfg.dims[0]
            ratio = min(t - 1, math.floor(ratio * t + 0.5)) / t
        for seed in spec.seeds:
            cfg = replace(spec.pretrain_cfg, mask_strategy=strategy,
                          mask_ratio=ratio, seed=seed)
            rows.append(_run_cell(spec, strategy, seed, cfg, spec.model_cfg,
                                  pre_ds, train_ds, eval_ds))
    return rows


def run_ratio_sweep(spec: AblationSpec) -> list[ReportRow]:
    """Accuracy vs masking ratio, with the encoder token count per cell."""
    pre_ds, train_ds, eval_ds = _datasets(spec)
    rows = []
    for ratio in spec.values:
        if not 0.0 < ratio < 1.0:
            raise ConfigError(f"ratio sweep values must be in (0, 1), got {ratio}")
        for seed in spec.seeds:
            cfg = replace(spec.pretrain_cfg, mask_ratio=float(ratio), seed=seed)
            rows.append(_run_cell(spec, float(ratio), seed, cfg, spec.model_cfg,
                                  pre_ds, train_ds, eval_ds))
    return rows


def decoder_activation_count(model_cfg: ModelConfig) -> int:
    """Memory proxy: token activations held across decoder blocks."""
    return model_cfg.depth_dec * model_cfg.n_tokens * model_cfg.d_dec


def run_decoder_depth_sweep(spec: AblationSpec) -> list[ReportRow]:
    pre_ds, train_ds, eval_ds = _datasets(spec)
    rows = []
    for depth in spec.values:
        if depth < 1:
            raise ConfigError(f"decoder depth must be >= 1, got {depth}")
        model_cfg = replace(spec.model_cfg, depth_dec=int(depth))
        for seed in spec.seeds:
            cfg = replace(spec.pretrain_cfg, seed=seed)
            rows.append(_run_cell(spec, int(depth), seed, cfg, model_cfg,
                                  pre_ds, train_ds, eval_ds))
    return rows


def run_data_efficiency_sweep(spec: AblationSpec) -> list[ReportRow]:
    """Pretrain on a fraction of the clips, finetune on the full labeled set.

    same_epochs keeps the epoch count fixed (fewer steps on small fractions);
    same_iterations keeps the step count fixed (more epochs on small fractions).
    """
    _, train_ds, eval_ds = _datasets(spec)
    base_steps = spec.pretrain_cfg.step_budget(spec.pretrain_clips)[1]
    rows = []
    for fraction in spec.values:
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"dataset fraction must be in (0, 1], got {fraction}")
        n = max(len(spec.model_cfg.dims), int(round(fraction * spec.pretrain_clips)))
        n -= n % 4  # keep the class balance
        n = max(4, n)
        size = _clip_size(spec.model_cfg)
        pre_ds = synth_moving_sprites(spec.data_seed, n, size=size,
                                      noise_level=spec.noise_level,
                                      sprite_extent=spec.sprite_extent)
        for seed in spec.seeds:
            if spec.regime == "same_iterations":
                cfg = replace(spec.pretrain_cfg, seed=seed, total_steps=base_steps)
            else:
                spe_full = spec.pretrain_cfg.steps_per_epoch(spec.pretrain_clips)
                epochs = base_steps / spe_full
                steps = max(1, int(round(epochs * spec.pretrain_cfg.steps_per_epoch(n))))
                cfg = replace(spec.pretrain_cfg, seed=seed, total_steps=steps)
            rows.append(_run_cell(spec, float(fraction), seed, cfg, spec.model_cfg,
                                  pre_ds, train_ds, eval_ds))
    return rows


def run_ablation(spec: AblationSpec) -> list[ReportRow]:
    runner = {"strategy": run_strategy_ablation,
              "ratio": run_ratio_sweep,
              "decoder_depth": run_decoder_depth_sweep,
              "dataset_fraction": run_data_efficiency_sweep}.get(spec.axis)
    if runner is None:
        raise ConfigError(f"unknown ablation axis {spec.axis!r}")
    return runner(spec)


def write_report(path: str, rows: list[ReportRow]):
    """Merge rows into the CSV at path; same (axis, value, seed) overwrites."""
    records: dict[tuple, dict] = {}
    if os.path.exists(path):
        with open(path) as fh:
            for rec in csv.DictReader(fh):
                records[(rec["axis"], rec["value"], rec["seed"])] = rec
    for row in rows:
        rec = {k: str(v) for k, v in row.as_record().items()}
        records[(rec["axis"], rec["value"], rec["seed"])] = rec
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for key in sorted(records):
            writer.writerow(records[key])


def summarize(rows: list[ReportRow]) -> dict:
    """Per-cell-value mean and std of accuracy."""
    by_value: dict[object, list[float]] = {}
    for row in rows:
        by_value.setdefault(row.value, []).append(row.accuracy)
    return {v: (float(np.mean(a)), float(np.std(a))) for v, a in by_value.items()}
