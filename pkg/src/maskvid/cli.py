"""Command-line entry point.

Subcommands: pretrain | finetune | probe | reconstruct | maskviz | gradcheck |
ablate. Config files are flat key=value text with dotted prefixes
(model.d_enc=64); --set overrides individual keys. Exit codes: 0 success,
1 config error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import gradsuite
from .errors import MaskvidError, ConfigError, NumericError
from .experiments import AblationSpec, run_ablation, summarize, write_report
from .masking import STRATEGIES, make_mask, mask_to_text
from .model import ModelConfig, mae_forward
from .training import (TrainConfig, finetune, linear_probe, load_checkpoint,
                       params_from_checkpoint, pretrain, save_checkpoint,
                       snapshot_config, write_loss_trace, _make_checkpoint,
                       OptimState)
from .video import (CubeGrid, VideoClip, cubify, decubify, read_raw_clip,
                    synth_moving_sprites)
from .viz import frame_to_image, gray_masked_cubes, mask_heatmap, write_ppm

_MODEL_KEYS = {"dims", "d_enc", "depth_enc", "heads_enc", "d_dec", "depth_dec",
               "heads_dec", "mlp_ratio", "num_classes"}
_TRAIN_KEYS = {"base_lr", "batch_size", "warmup_epochs", "total_epochs",
               "weight_decay", "beta1", "beta2", "mask_strategy", "mask_ratio",
               "seed", "mode", "lr_floor", "flip_augment", "layer_decay",
               "total_steps"}
_DATA_KEYS = {"count", "seed", "raw_path", "label_count", "eval_count"}
_ABLATE_KEYS = {"axis", "values", "seeds", "pretrain_clips", "label_clips",
                "eval_clips", "regime", "pretrain_steps", "finetune_steps"}

_DATA_DEFAULTS = {"count": 64, "seed": 0, "raw_path": "", "label_count": 32,
                  "eval_count": 32}


def _log(event: str, **fields):
    parts = [f"event={event}"] + [f"{k}={v}" for k, v in fields.items()]
    print(" ".join(parts), flush=True)


def parse_config_file(path: str) -> dict[str, str]:
    cfg: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            cfg[key.strip()] = val.strip()
    return cfg


def _validate_keys(cfg: dict[str, str]):
    for key in cfg:
        prefix, _, name = key.partition(".")
        known = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS,
                 "ablate": _ABLATE_KEYS}.get(prefix)
        if known is None or name not in known:
            raise ConfigError(f"unknown config key {key!r}")


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def build_configs(cfg: dict[str, str]) -> tuple[ModelConfig, TrainConfig, dict]:
    model_kwargs, train_kwargs = {}, {}
    data = dict(_DATA_DEFAULTS)
    for key, raw in cfg.items():
        prefix, _, name = key.partition(".")
        val = _coerce(raw)
        if prefix == "model":
            if name == "dims":
                val = tuple(int(x) for x in str(raw).split(",") if x != "")
            model_kwargs[name] = val
        elif prefix == "train":
            train_kwargs[name] = val
        elif prefix == "data":
            data[name] = val
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs), data


def _resolve_out(args) -> str:
    out = os.environ.get("ARTIFACT_OUT") or args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_resolved(cfg: dict[str, str], out: str, name: str = "resolved.cfg"):
    with open(os.path.join(out, name), "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key}={cfg[key]}\n")


def _load_cfg(args, extra: dict[str, str] | None = None) -> dict[str, str]:
    cfg = parse_config_file(args.config) if args.config else {}
    for override in args.set or []:
        if "=" not in override:
            raise ConfigError(f"--set expects key=value, got {override!r}")
        key, _, val = override.partition("=")
        cfg[key] = val
    if getattr(args, "seed", None) is not None:
        cfg["train.seed"] = str(args.seed)
    if extra:
        cfg.update(extra)
    _validate_keys(cfg)
    return cfg


def _sprites_for(model_cfg: ModelConfig, count: int, seed: int):
    t, h, w = model_cfg.dims
    return synth_moving_sprites(seed, count, size=(t * 2, h * 16, w * 16))


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    model_cfg, train_cfg, data = build_configs(cfg)
    out = _resolve_out(args)
    if data["raw_path"]:
        dataset = [read_raw_clip(data["raw_path"])]
    else:
        dataset = _sprites_for(model_cfg, data["count"], data["seed"])
    _log("pretrain_start", clips=len(dataset), steps=train_cfg.step_budget(len(dataset))[1],
         strategy=train_cfg.mask_strategy, ratio=train_cfg.mask_ratio)
    result = pretrain(train_cfg, dataset, model_cfg=model_cfg)
    _write_resolved(snapshot_config(model_cfg, train_cfg), out)
    write_loss_trace(os.path.join(out, "loss.csv"), result.trace)
    save_checkpoint(result.checkpoint, os.path.join(out, "checkpoint.ckpt"))
    if result.aborted:
        _log("pretrain_aborted", step=result.checkpoint.step)
        return 2
    final = result.trace[-1][2] if result.trace else float("nan")
    _log("pretrain_done", final_loss=f"{final:.6f}", out=out)
    return 0


def _cmd_supervised(args, runner, tag: str) -> int:
    cfg = _load_cfg(args)
    model_cfg, train_cfg, data = build_configs(cfg)
    out = _resolve_out(args)
    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    train_ds = _sprites_for(params.config, data["label_count"], data["seed"] + 1)
    eval_ds = _sprites_for(params.config, data["eval_count"], data["seed"] + 2)
    _log(f"{tag}_start", train_clips=len(train_ds), eval_clips=len(eval_ds))
    result = runner(params, train_ds, eval_ds, train_cfg)
    _write_resolved(snapshot_config(params.config, train_cfg), out)
    write_loss_trace(os.path.join(out, f"{tag}_loss.csv"), result.trace)
    rng = np.random.default_rng(train_cfg.seed)
    state = OptimState.for_params([])
    full = _make_checkpoint(result.params, result.head, state, len(result.trace),
                            snapshot_config(params.config, train_cfg), rng)
    save_checkpoint(full, os.path.join(out, f"{tag}.ckpt"))
    _log(f"{tag}_done", accuracy=f"{result.accuracy:.4f}", out=out)
    return 0


def cmd_finetune(args) -> int:
    return _cmd_supervised(args, finetune, "finetune")


def cmd_probe(args) -> int:
    return _cmd_supervised(args, linear_probe, "probe")


def cmd_reconstruct(args) -> int:
    cfg = _load_cfg(args)
    _, _, data = build_configs(cfg)
    out = _resolve_out(args)
    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    if data["raw_path"]:
        clip = read_raw_clip(data["raw_path"])
    else:
        clip = _sprites_for(params.config, 4, data["seed"]).clips[0]
    if clip.grid_dims != params.config.dims:
        raise ConfigError(f"clip grid {clip.grid_dims} != checkpoint grid {params.config.dims}")
    dims = (params.config.dims[0], params.config.spatial_sites)
    mask = make_mask(args.strategy, dims, args.ratio, np.random.default_rng(args.seed or 0))
    output = mae_forward(clip, mask, params)
    pixels = output.targets.denormalize(output.predictions.data)
    keep = mask.visible_indices
    pixels[keep] = cubify(clip).tokens[keep]
    recon = decubify(CubeGrid(np.clip(pixels, 0.0, 1.0).astype(np.float32),
                              params.config.dims))
    masked_clip = gray_masked_cubes(clip, mask)
    t = clip.pixels.shape[1]
    for f in range(t):
        write_ppm(os.path.join(out, f"frame{f:03d}_original.ppm"), frame_to_image(clip, f))
        write_ppm(os.path.join(out, f"frame{f:03d}_masked.ppm"), frame_to_image(masked_clip, f))
        write_ppm(os.path.join(out, f"frame{f:03d}_recon.ppm"), frame_to_image(recon, f))
    _log("reconstruct_done", frames=t, files=3 * t, out=out)
    return 0


def cmd_maskviz(args) -> int:
    out = _resolve_out(args)
    dims = tuple(int(x) for x in args.dims.split(","))
    if len(dims) != 2:
        raise ConfigError(f"--dims expects T',S — got {args.dims!r}")
    mask = make_mask(args.strategy, dims, args.ratio, np.random.default_rng(args.seed or 0))
    text = mask_to_text(mask)
    base = f"mask_{args.strategy}_{args.ratio}"
    with open(os.path.join(out, base + ".txt"), "w") as fh:
        fh.write(text)
    write_ppm(os.path.join(out, base + ".ppm"), mask_heatmap(mask))
    _log("maskviz_done", masked=mask.n_masked, visible=mask.n_visible, out=out)
    return 0


def cmd_gradcheck(args) -> int:
    worst = gradsuite.run_gradient_suite(verbose=True)
    _log("gradcheck_done", max_rel_error=f"{worst:.3e}")
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < 1e-4 else 2


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    model_cfg, _, _ = build_configs({k: v for k, v in cfg.items()
                                     if k.startswith("model.")})
    get = lambda name, default: _coerce(cfg.get(f"ablate.{name}", json.dumps(default)))
    axis = cfg.get("ablate.axis", args.axis)
    if axis is None:
        raise ConfigError("ablate needs an axis (--axis or ablate.axis)")
    defaults = {"strategy": ["tube", "random", "frame"],
                "ratio": [0.5, 0.75, 0.9],
                "decoder_depth": [1, 2, 4],
                "dataset_fraction": [0.25, 0.5, 1.0]}
    values = get("values", defaults.get(axis, []))
    spec = AblationSpec(
        axis=axis, values=values, seeds=get("seeds", [0, 1, 2]),
        model_cfg=model_cfg,
        pretrain_clips=get("pretrain_clips", 16),
        label_clips=get("label_clips", 4), eval_clips=get("eval_clips", 64),
        regime=get("regime", "same_epochs"))
    from dataclasses import replace
    spec.pretrain_cfg = replace(spec.pretrain_cfg, total_steps=get("pretrain_steps", 2000))
    spec.finetune_cfg = replace(spec.finetune_cfg, total_steps=get("finetune_steps", 200))
    out = _resolve_out(args)
    _log("ablate_start", axis=axis, cells=len(values) * len(spec.seeds))
    rows = run_ablation(spec)
    write_report(os.path.join(out, "report.csv"), rows)
    for value, (mean, std) in summarize(rows).items():
        _log("ablate_cell", value=value, mean_accuracy=f"{mean:.4f}", std=f"{std:.4f}")
    _write_resolved(cfg, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskvid",
                                     description="Masked video autoencoding at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--out", help="output directory (ARTIFACT_OUT wins)")
        p.add_argument("--seed", type=int, help="training seed override")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("pretrain", help="masked-reconstruction pre-training"))
    common(sub.add_parser("finetune", help="supervised fine-tuning"), checkpoint=True)
    common(sub.add_parser("probe", help="linear probe on a frozen encoder"), checkpoint=True)

    p = sub.add_parser("reconstruct", help="write original/masked/reconstruction frames")
    common(p, checkpoint=True)
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--strategy", choices=STRATEGIES, default="tube")

    p = sub.add_parser("maskviz", help="text grid + heatmap for a mask")
    common(p)
    p.add_argument("--dims", default="8,196", help="T',S")
    p.add_argument("--ratio", type=float, default=0.9)
    p.add_argument("--strategy", choices=STRATEGIES, default="tube")

    common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))

    p = sub.add_parser("ablate", help="run an ablation sweep")
    common(p)
    p.add_argument("--axis", choices=["strategy", "ratio", "decoder_depth",
                                      "dataset_fraction"])
    return parser


_HANDLERS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "probe": cmd_probe,
             "reconstruct": cmd_reconstruct, "maskviz": cmd_maskviz,
             "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return _HANDLERS[args.command](args)
    except NumericError as exc:
        _log("numeric_abort", error=str(exc))
        return 2
    except MaskvidError as exc:
        _log("config_error", error=str(exc))
        return 1
    except FileNotFoundError as exc:
        _log("config_error", error=str(exc))
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
