"""Loss, optimizer, schedule, training loops, and checkpointing."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .masking import make_mask
from .model import (MAEParams, ModelConfig, classify, init_head_params,
                    init_mae_params, mae_forward_batch)
from .tensor import Param, Tape, Tensor
from .video import TargetCubes, VideoClip, cubify, normalize_cube_targets


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    batch_size: int = 8
    warmup_epochs: int = 5
    total_epochs: int = 50
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    mask_strategy: str = "tube"
    mask_ratio: float = 0.9
    seed: int = 0
    mode: str = "pretrain"  # pretrain | finetune | probe
    lr_floor: float = 1e-6
    flip_augment: bool = False
    layer_decay: float = 0.75
    total_steps: int | None = None  # overrides total_epochs when set

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} must be < total_epochs {self.total_epochs}"
            )
        if self.mode not in ("pretrain", "finetune", "probe"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    def steps_per_epoch(self, n_items: int) -> int:
        return max(1, math.ceil(n_items / self.batch_size))

    def step_budget(self, n_items: int) -> tuple[int, int]:
        """(warmup_steps, total_steps) for the schedule."""
        spe = self.steps_per_epoch(n_items)
        if self.total_steps is not None:
            total = self.total_steps
            warmup = min(self.warmup_epochs * spe, total // 10)
        else:
            total = self.total_epochs * spe
            warmup = self.warmup_epochs * spe
        return warmup, total


def pretrain_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"mode": "pretrain", "beta2": 0.95, **overrides})


def finetune_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"mode": "finetune", "beta2": 0.999, "base_lr": 1e-3, **overrides})


# -- loss ---------------------------------------------------------------------

def masked_mse_loss(pred: Tensor, targets, mask) -> Tensor:
    """Mean squared error over masked tokens only, averaged per pixel entry.

    pred is (N, C) (or (B, N, C) with per-sample masks); targets supplies the
    normalized cube values; visible tokens contribute nothing.
    """
    values = targets.values if isinstance(targets, TargetCubes) else np.asarray(targets)
    if pred.data.ndim == 2:
        omega = mask.masked_indices
        if omega.size == 0:
            raise ContractError("masked_mse_loss needs at least one masked token")
        if pred.shape[0] != mask.mask.size or values.shape != pred.shape:
            raise ContractError(
                f"pred {pred.shape}, targets {values.shape}, mask over {mask.mask.size}"
            )
        target_rows = values[omega]
    else:
        omega = np.stack([m.masked_indices for m in mask])
        if omega.shape[1] == 0:
            raise ContractError("masked_mse_loss needs at least one masked token")
        batch = np.arange(pred.shape[0])[:, None]
        target_rows = values[batch, omega]
    diff = tk.sub(tk.gather_rows(pred, omega), Tensor(target_rows.astype(pred.dtype)))
    return tk.reduce_mean(tk.mul(diff, diff))


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimState":
        return cls(m={p.name: np.zeros_like(p.value.data) for p in params},
                   v={p.name: np.zeros_like(p.value.data) for p in params})


def adamw_step(params, state: OptimState, lr: float, beta1: float = 0.9,
               beta2: float = 0.95, weight_decay: float = 0.05, eps: float = 1e-8,
               lr_scales: dict[str, float] | None = None):
    """Decoupled-weight-decay Adam with bias correction.

    Decay is applied before the moment update (param *= 1 - lr*wd). Aborts
    without mutating anything if any gradient is non-finite.
    """
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {p.name}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        lr_p = lr * (lr_scales.get(p.name, 1.0) if lr_scales else 1.0)
        g = p.grad
        p.value.data *= 1.0 - lr_p * weight_decay
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value.data -= lr_p * (m / c1) / (np.sqrt(v / c2) + eps)


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: peak lr = base_lr * batch_size / 256."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    return base_lr * batch_size / 256.0


def cosine_warmup_lr(step: int, warmup_steps: int, total_steps: int,
                     peak: float, floor: float = 0.0) -> float:
    """Linear 0 -> peak over warmup, then half-cosine peak -> floor."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def layer_lr_scales(config: ModelConfig, decay: float) -> dict[str, float]:
    """Per-block multiplicative lr factors for fine-tuning; head stays at 1."""
    scales: dict[str, float] = {}
    n = config.depth_enc
    scales["embed/w"] = scales["embed/b"] = decay ** (n + 1)
    for i in range(n):
        for suffix in ("ln1/g", "ln1/b", "wq", "bq", "wk", "bk", "wv", "bv",
                       "wo", "bo", "ln2/g", "ln2/b", "w1", "b1", "w2", "b2"):
            scales[f"enc/block{i}/{suffix}"] = decay ** (n - i)
    return scales


# -- checkpointing --------------------------------------------------------------

_CKPT_MAGIC = "maskvid-checkpoint-v1"
_CKPT_MARKER = b"\n---\n"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optim_m: dict[str, np.ndarray]
    optim_v: dict[str, np.ndarray]
    opt_step: int
    step: int
    config: dict[str, str]
    rng_state: dict


def snapshot_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict[str, str]:
    snap = {}
    for key in ("dims", "d_enc", "depth_enc", "heads_enc", "d_dec", "depth_dec",
                "heads_dec", "mlp_ratio", "num_classes"):
        snap[f"model.{key}"] = json.dumps(getattr(model_cfg, key))
    for key in ("base_lr", "batch_size", "warmup_epochs", "total_epochs",
                "weight_decay", "beta1", "beta2", "mask_strategy", "mask_ratio",
                "seed", "mode", "lr_floor", "flip_augment", "layer_decay",
                "total_steps"):
        snap[f"train.{key}"] = json.dumps(getattr(train_cfg, key))
    return snap


def model_config_from_snapshot(config: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for key, raw in config.items():
        if key.startswith("model."):
            val = json.loads(raw)
            name = key[len("model."):]
            kwargs[name] = tuple(val) if name == "dims" else val
    return ModelConfig(**kwargs)


def params_from_checkpoint(ckpt: Checkpoint) -> MAEParams:
    cfg = model_config_from_snapshot(ckpt.config)
    params = {name: Param(arr.copy(), name) for name, arr in ckpt.params.items()}
    return MAEParams(params, cfg)


def save_checkpoint(ckpt: Checkpoint, path: str):
    """Plain-text manifest + raw little-endian float32 payload, written atomically."""
    names = sorted(ckpt.params)
    entries = [("param/" + n, ckpt.params[n]) for n in names]
    entries += [("optim/m/" + n, ckpt.optim_m[n]) for n in sorted(ckpt.optim_m)]
    entries += [("optim/v/" + n, ckpt.optim_v[n]) for n in sorted(ckpt.optim_v)]
    header = [_CKPT_MAGIC,
              f"step={ckpt.step}",
              f"opt_step={ckpt.opt_step}",
              "rng=" + json.dumps(ckpt.rng_state, sort_keys=True)]
    for key in sorted(ckpt.config):
        header.append(f"config.{key}={ckpt.config[key]}")
    payload = bytearray()
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        digest = hashlib.sha256(raw).hexdigest()
        shape = ",".join(str(s) for s in arr.shape)
        header.append(
            f"tensor={name} shape={shape} dtype=float32 offset={len(payload)} sha256={digest}"
        )
        payload.extend(raw)
    header.append(f"payload_bytes={len(payload)}")
    blob = "\n".join(header).encode() + _CKPT_MARKER + bytes(payload)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = blob.find(_CKPT_MARKER)
    if pos < 0:
        raise CheckpointError(f"{path}: header marker not found (truncated file?)")
    header = blob[:pos].decode()
    payload = blob[pos + len(_CKPT_MARKER):]
    lines = header.split("\n")
    if lines[0] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic line {lines[0]!r}")
    step = opt_step = None
    rng_state = None
    config: dict[str, str] = {}
    tensors = []
    payload_bytes = None
    for line in lines[1:]:
        key, _, val = line.partition("=")
        if key == "step":
            step = int(val)
        elif key == "opt_step":
            opt_step = int(val)
        elif key == "rng":
            rng_state = json.loads(val)
        elif key.startswith("config."):
            config[key[len("config."):]] = val
        elif key == "tensor":
            fields = dict(f.split("=", 1) for f in ("name=" + val).split(" "))
            tensors.append(fields)
        elif key == "payload_bytes":
            payload_bytes = int(val)
        else:
            raise CheckpointError(f"{path}: unknown manifest key {key!r}")
    for req, name in ((step, "step"), (opt_step, "opt_step"), (rng_state, "rng"),
                      (payload_bytes, "payload_bytes")):
        if req is None:
            raise CheckpointError(f"{path}: manifest missing field {name!r}")
    if len(payload) != payload_bytes:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest says {payload_bytes}"
        )
    params, optim_m, optim_v = {}, {}, {}
    for t in tensors:
        shape = tuple(int(s) for s in t["shape"].split(",")) if t["shape"] else ()
        nbytes = int(np.prod(shape)) * 4
        offset = int(t["offset"])
        raw = payload[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: tensor {t['name']} payload truncated")
        if hashlib.sha256(raw).hexdigest() != t["sha256"]:
            raise CheckpointError(f"{path}: tensor {t['name']} failed its content hash")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        name = t["name"]
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("optim/m/"):
            optim_m[name[len("optim/m/"):]] = arr
        elif name.startswith("optim/v/"):
            optim_v[name[len("optim/v/"):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor namespace {name!r}")
    return Checkpoint(params, optim_m, optim_v, opt_step, step, config, rng_state)


# -- training loops ---------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    trace: list  # (step, lr, loss)
    aborted: bool = False


def _clip_grids(dataset) -> tuple[np.ndarray, np.ndarray]:
    """Precompute cube grids and normalized targets for every clip."""
    grids, targets = [], []
    for item in dataset:
        clip = item[0] if isinstance(item, tuple) else item
        grid = cubify(clip)
        grids.append(grid.tokens)
        targets.append(normalize_cube_targets(grid).values)
    return np.stack(grids).astype(np.float32), np.stack(targets).astype(np.float32)


def _flip_clip(clip: VideoClip) -> VideoClip:
    return VideoClip(np.ascontiguousarray(clip.pixels[:, :, :, ::-1]),
                     stride=clip.stride, start=clip.start)


def _make_checkpoint(params: MAEParams, extra_params: dict[str, Param] | None,
                     state: OptimState, step: int, config: dict[str, str],
                     rng: np.random.Generator) -> Checkpoint:
    values = {n: p.value.data.copy() for n, p in params.params.items()}
    if extra_params:
        values.update({n: p.value.data.copy() for n, p in extra_params.items()})
    return Checkpoint(params=values,
                      optim_m={k: v.copy() for k, v in state.m.items()},
                      optim_v={k: v.copy() for k, v in state.v.items()},
                      opt_step=state.step, step=step, config=dict(config),
                      rng_state=rng.bit_generator.state)


def pretrain(config: TrainConfig, dataset, params: MAEParams | None = None,
             model_cfg: ModelConfig | None = None,
             resume: Checkpoint | None = None,
             stop_step: int | None = None) -> PretrainResult:
    """Masked-reconstruction pre-training; deterministic under (config, dataset).

    stop_step interrupts the run after that absolute step while keeping the
    full-length schedule, so a later resume reproduces the uninterrupted run.
    """
    if len(dataset) == 0:
        raise ContractError("pretrain needs a nonempty dataset")
    if resume is not None:
        params = params_from_checkpoint(resume)
        model_cfg = params.config
    if model_cfg is None:
        model_cfg = params.config if params is not None else ModelConfig()
    if params is None:
        params = init_mae_params(model_cfg, seed=config.seed)

    grids, targets = _clip_grids(dataset)
    if config.flip_augment:
        flipped = [_flip_clip(item[0] if isinstance(item, tuple) else item) for item in dataset]
        fgrids, ftargets = _clip_grids(flipped)

    mask_dims = (model_cfg.dims[0], model_cfg.spatial_sites)
    warmup, total = config.step_budget(len(dataset))
    peak = scaled_lr(config.base_lr, config.batch_size)
    state = OptimState.for_params(params.values())
    start_step = 0
    rng = np.random.default_rng(config.seed)
    if resume is not None:
        state = OptimState(m={k: v.copy() for k, v in resume.optim_m.items()},
                           v={k: v.copy() for k, v in resume.optim_v.items()},
                           step=resume.opt_step)
        start_step = resume.step
        rng.bit_generator.state = resume.rng_state
    config_snap = snapshot_config(model_cfg, config)

    end = total if stop_step is None else min(total, stop_step)
    trace = []
    n = len(dataset)
    for step in range(start_step, end):
        lr = cosine_warmup_lr(step, warmup, total, peak, config.lr_floor)
        idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
        masks = [make_mask(config.mask_strategy, mask_dims, config.mask_ratio, rng)
                 for _ in idx]
        if config.flip_augment:
            flips = rng.random(config.batch_size) < 0.5
            batch_grids = np.where(flips[:, None, None], fgrids[idx], grids[idx])
            batch_targets = np.where(flips[:, None, None], ftargets[idx], targets[idx])
        else:
            batch_grids = grids[idx]
            batch_targets = targets[idx]
        visible = np.stack([m.visible_indices for m in masks])
        params.zero_grad()
        with Tape() as tape:
            pred = mae_forward_batch(batch_grids, visible, params)
            loss = masked_mse_loss(pred, batch_targets, masks)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                # params are still the pre-step values: nothing was mutated yet
                return PretrainResult(
                    _make_checkpoint(params, None, state, step, config_snap, rng),
                    trace, aborted=True)
            tape.backward(loss)
        try:
            adamw_step(params.values(), state, lr, config.beta1, config.beta2,
                       config.weight_decay)
        except NumericError:
            return PretrainResult(
                _make_checkpoint(params, None, state, step, config_snap, rng),
                trace, aborted=True)
        trace.append((step, lr, loss_val))
    ckpt = _make_checkpoint(params, None, state, end, config_snap, rng)
    return PretrainResult(ckpt, trace)


@dataclass
class EvalResult:
    accuracy: float
    params: MAEParams
    head: dict[str, Param]
    trace: list


def _eval_accuracy(params: MAEParams, head: dict[str, Param], dataset,
                   batch_size: int = 16) -> float:
    correct = 0
    for i in range(0, len(dataset), batch_size):
        clips = [dataset[j][0] for j in range(i, min(i + batch_size, len(dataset)))]
        labels = [dataset[j][1] for j in range(i, min(i + batch_size, len(dataset)))]
        logits = classify(clips, params, head)
        correct += int((logits.data.argmax(axis=-1) == np.asarray(labels)).sum())
    return correct / len(dataset)


def _supervised_loop(params: MAEParams, train_ds, eval_ds, config: TrainConfig,
                     trainable, lr_scales=None) -> EvalResult:
    head = init_head_params(params.config, seed=config.seed)
    all_trainable = list(trainable) + list(head.values())
    state = OptimState.for_params(all_trainable)
    warmup, total = config.step_budget(len(train_ds))
    peak = scaled_lr(config.base_lr, config.batch_size)
    rng = np.random.default_rng(config.seed)
    n = len(train_ds)
    labels_all = np.array([train_ds[i][1] for i in range(n)])
    trace = []
    for step in range(total):
        lr = cosine_warmup_lr(step, warmup, total, peak, config.lr_floor)
        idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
        clips = [train_ds[int(i)][0] for i in idx]
        for p in all_trainable:
            p.zero_grad()
        with Tape() as tape:
            logits = classify(clips, params, head)
            loss = tk.cross_entropy(logits, labels_all[idx])
            loss_val = loss.item()
            tape.backward(loss)
        adamw_step(all_trainable, state, lr, config.beta1, config.beta2,
                   config.weight_decay, lr_scales=lr_scales)
        trace.append((step, lr, loss_val))
    acc = _eval_accuracy(params, head, eval_ds)
    return EvalResult(acc, params, head, trace)


def finetune(checkpoint: Checkpoint | MAEParams, train_ds, eval_ds,
             config: TrainConfig) -> EvalResult:
    """Cross-entropy training of encoder + head; the decoder is discarded."""
    params = (params_from_checkpoint(checkpoint)
              if isinstance(checkpoint, Checkpoint) else checkpoint)
    _check_geometry(params, train_ds)
    scales = layer_lr_scales(params.config, config.layer_decay)
    return _supervised_loop(params, train_ds, eval_ds, config,
                            trainable=params.encoder_params(), lr_scales=scales)


def linear_probe(checkpoint: Checkpoint | MAEParams, train_ds, eval_ds,
                 config: TrainConfig) -> EvalResult:
    """Train only the classification head on a frozen encoder."""
    params = (params_from_checkpoint(checkpoint)
              if isinstance(checkpoint, Checkpoint) else checkpoint)
    _check_geometry(params, train_ds)
    return _supervised_loop(params, train_ds, eval_ds, config, trainable=[])


def _check_geometry(params: MAEParams, dataset):
    clip = dataset[0][0]
    if clip.grid_dims != params.config.dims:
        raise ConfigError(
            f"dataset grid {clip.grid_dims} != checkpoint grid {params.config.dims}"
        )


def write_loss_trace(path: str, trace):
    with open(path, "w") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in trace:
            fh.write(f"{step},{lr:.10g},{loss:.10g}\n")
