"""Finite-difference verification of every primitive and the whole model.

Everything here runs in float64: central differences at h=1e-5 drown in
float32 rounding. The full-model check probes a random subset of entries per
parameter tensor so the suite stays under a minute.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tk
from .masking import tube_mask
from .model import ModelConfig, init_mae_params, init_head_params, mae_forward, classify
from .tensor import Param, Tensor, finite_diff_check
from .training import masked_mse_loss
from .video import VideoClip


def _param(rng, shape, name) -> Param:
    return Param(rng.standard_normal(shape), name, dtype=np.float64)


def _sq_mean(y: Tensor) -> Tensor:
    return tk.reduce_mean(tk.mul(y, y))


def _generic_block(width: int, name: str, rng, mlp_ratio: int = 4) -> dict:
    """Block params at a generic point: fan-in-scaled weights, noisy affines.

    The std-0.02 training init leaves many true gradients near 1e-8, below
    what central differences at h=1e-5 can resolve; checking at a generic
    point keeps every signal well above the noise floor.
    """
    params = tk.init_block_params(width, name, rng, mlp_ratio=mlp_ratio,
                                  dtype=np.float64)
    for p in params.values():
        d = p.value.data
        if d.ndim == 2:
            d[:] = rng.standard_normal(d.shape) / np.sqrt(d.shape[0])
        elif p.name.endswith(("/g",)):
            d[:] = 1.0 + 0.1 * rng.standard_normal(d.shape)
        else:
            d[:] = 0.1 * rng.standard_normal(d.shape)
    return params


def _generic_mae_params(cfg: ModelConfig, rng):
    """Float64 model params at the same kind of generic point."""
    params = init_mae_params(cfg, seed=0).astype(np.float64)
    for p in params.values():
        d = p.value.data
        if d.ndim == 2:
            d[:] = rng.standard_normal(d.shape) / np.sqrt(d.shape[0])
        elif p.name.endswith("/g"):
            d[:] = 1.0 + 0.1 * rng.standard_normal(d.shape)
        elif p.name == "mask_token":
            d[:] = rng.standard_normal(d.shape)
        else:
            d[:] = 0.1 * rng.standard_normal(d.shape)
    return params


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per primitive, each through a scalarizer."""
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}

    a = _param(rng, (3, 4), "a")
    b = _param(rng, (4, 2), "b")
    out["matmul"] = finite_diff_check(lambda: _sq_mean(tk.matmul(a.value, b.value)), [a, b])

    x = _param(rng, (3, 4), "x")
    y = _param(rng, (4,), "y")
    out["add_broadcast"] = finite_diff_check(lambda: _sq_mean(tk.add(x.value, y.value)), [x, y])
    out["sub"] = finite_diff_check(lambda: _sq_mean(tk.sub(x.value, x.value + y.value)), [x, y])
    out["mul"] = finite_diff_check(lambda: _sq_mean(tk.mul(x.value, y.value)), [x, y])
    out["scale"] = finite_diff_check(lambda: _sq_mean(tk.scale(x.value, -1.7)), [x])
    out["gelu"] = finite_diff_check(lambda: _sq_mean(tk.gelu(x.value)), [x])
    out["softmax"] = finite_diff_check(lambda: _sq_mean(tk.softmax(x.value)), [x])

    g = _param(rng, (4,), "gamma")
    be = _param(rng, (4,), "beta")
    out["layer_norm"] = finite_diff_check(
        lambda: _sq_mean(tk.layer_norm(x.value, g.value, be.value)), [x, g, be])

    out["transpose"] = finite_diff_check(lambda: _sq_mean(tk.transpose(tk.matmul(a.value, b.value))), [a, b])
    out["permute"] = finite_diff_check(
        lambda: _sq_mean(tk.permute(tk.reshape(x.value, (3, 2, 2)), (1, 0, 2))), [x])
    out["reshape"] = finite_diff_check(lambda: _sq_mean(tk.reshape(x.value, (2, 6))), [x])
    out["reduce_sum"] = finite_diff_check(lambda: tk.reduce_sum(tk.mul(x.value, x.value)), [x])
    out["reduce_mean"] = finite_diff_check(lambda: tk.reduce_mean(tk.mul(x.value, x.value)), [x])
    out["mean_axis"] = finite_diff_check(lambda: _sq_mean(tk.mean_axis(x.value, axis=-2)), [x])

    idx = np.array([0, 2])
    out["gather_rows"] = finite_diff_check(lambda: _sq_mean(tk.gather_rows(x.value, idx)), [x])
    fill = _param(rng, (4,), "fill")
    vis = _param(rng, (2, 4), "vis")
    out["scatter_rows"] = finite_diff_check(
        lambda: _sq_mean(tk.scatter_rows(vis.value, idx, fill.value, 5)), [vis, fill])

    labels = np.array([1, 0, 3])
    out["cross_entropy"] = finite_diff_check(
        lambda: tk.cross_entropy(x.value, labels), [x])

    blk = _generic_block(8, "blk", rng)
    tokens = _param(rng, (3, 8), "tokens")
    out["attention_block"] = finite_diff_check(
        lambda: _sq_mean(tk.attention_block(tokens.value, blk, "blk", heads=2)),
        list(blk.values()) + [tokens])
    return out


def mae_forward_check(samples_per_param: int = 4, seed: int = 0,
                      config: ModelConfig | None = None) -> float:
    """End-to-end gradient check of pretraining loss on the desk config."""
    cfg = config or ModelConfig(depth_enc=2, depth_dec=2)
    rng = np.random.default_rng(seed)
    params = _generic_mae_params(cfg, rng)
    t, h, w = cfg.dims
    clip = VideoClip(rng.random((3, 2 * t, 16 * h, 16 * w)))
    mask = tube_mask((t, h * w), 0.9, rng)

    def f():
        out = mae_forward(clip, mask, params)
        return masked_mse_loss(out.predictions, out.targets, mask)

    return finite_diff_check(f, params.values(), samples_per_param=samples_per_param,
                             seed=seed)


def classify_check(samples_per_param: int = 4, seed: int = 0) -> float:
    """Gradient check of the classification path (encoder + head)."""
    cfg = ModelConfig(dims=(2, 2, 2), d_enc=16, depth_enc=2, heads_enc=2,
                      d_dec=8, depth_dec=1, heads_dec=2)
    rng = np.random.default_rng(seed)
    params = _generic_mae_params(cfg, rng)
    head = {n: Param(p.value.data.astype(np.float64), n, dtype=np.float64)
            for n, p in init_head_params(cfg, seed=seed).items()}
    head["head/w"].value.data[:] = rng.standard_normal(head["head/w"].value.shape) / 4.0
    clip = VideoClip(rng.random((3, 4, 32, 32)))

    def f():
        return tk.cross_entropy(classify(clip, params, head), np.array(2))

    checkable = params.encoder_params() + list(head.values())
    return finite_diff_check(f, checkable, samples_per_param=samples_per_param,
                             seed=seed)


def run_gradient_suite(verbose: bool = False, seed: int = 0) -> float:
    """Max relative error across primitives, the MAE forward, and classify."""
    worst = 0.0
    for name, err in primitive_checks(seed).items():
        if verbose:
            print(f"gradcheck {name}: {err:.3e}")
        worst = max(worst, err)
    err = mae_forward_check(seed=seed)
    if verbose:
        print(f"gradcheck mae_forward: {err:.3e}")
    worst = max(worst, err)
    err = classify_check(seed=seed)
    if verbose:
        print(f"gradcheck classify: {err:.3e}")
    worst = max(worst, err)
    return worst
