"""Dense tensors with a recorded-operation tape for reverse-mode differentiation.

The engine is deliberately small: numpy arrays carry the data, a Tape records
every primitive application in execution order, and backward() replays the
tape in reverse. Float32 is the training dtype; float64 exists for gradient
checking only.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DimensionError, NumericError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """N-dimensional array plus autodiff bookkeeping.

    A Tensor is a leaf (user-created, optionally requires_grad) or the output
    of a recorded primitive. Leaf gradients accumulate in .grad; intermediate
    gradients live only inside a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op_output")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._op_output = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Param:
    """Named trainable tensor with an always-allocated gradient buffer."""

    def __init__(self, value, name: str, dtype=np.float32):
        if isinstance(value, Tensor):
            tensor = value
        else:
            tensor = Tensor(np.asarray(value, dtype=dtype))
        tensor.requires_grad = True
        tensor.zero_grad()
        self.value = tensor
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    def zero_grad(self):
        self.value.zero_grad()

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of primitive applications.

    Ops append themselves in execution order, so the list is already
    topologically sorted; backward() visits each entry exactly once in
    reverse.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self._entries.append(_TapeEntry(output, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            input_grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, input_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._op_output:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    inp.accumulate_grad(gi)


def backward(tape: Tape, loss: Tensor):
    """Free-function alias for Tape.backward."""
    tape.backward(loss)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op_output = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise primitives ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def bwd(g):
        return (g * c,)

    return _record(out, (a,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor(xd * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), bwd)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = Tensor(np.swapaxes(x.data, -1, -2))

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (x,), bwd)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (x,), bwd)


# -- normalization / softmax ----------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine width mismatch: x has D={d}, gamma {gamma.shape}, beta {beta.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), bwd)


# -- reductions -------------------------------------------------------------

def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(np.array([x.data.sum()], dtype=x.dtype))

    def bwd(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return _record(out, (x,), bwd)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.array([x.data.mean()], dtype=x.dtype))

    def bwd(g):
        return (np.full_like(x.data, g.reshape(-1)[0] / n),)

    return _record(out, (x,), bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def bwd(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _record(out, (x,), bwd)


# -- gather / scatter --------------------------------------------------------

def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along axis -2. indices is (K,) for 2-d x or (B, K) for 3-d x."""
    idx = np.asarray(indices)
    if x.data.ndim == 2:
        if idx.ndim != 1:
            raise DimensionError(f"expected 1-d indices for 2-d input, got {idx.shape}")
        out = Tensor(x.data[idx])

        def bwd(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)

    elif x.data.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
            raise DimensionError(
                f"expected indices ({x.shape[0]}, K) for input {x.shape}, got {idx.shape}"
            )
        batch = np.arange(x.shape[0])[:, None]
        out = Tensor(x.data[batch, idx])

        def bwd(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (batch, idx), g)
            return (gx,)

    else:
        raise DimensionError(f"gather_rows supports 2-d or 3-d input, got {x.shape}")
    return _record(out, (x,), bwd)


def scatter_rows(visible: Tensor, indices: np.ndarray, fill: Tensor, n_rows: int) -> Tensor:
    """Place visible rows at `indices` along axis -2; every other row is `fill`.

    fill is a single vector of width visible.shape[-1] (the learnable mask
    token); its gradient is the sum over all filled positions.
    """
    idx = np.asarray(indices)
    d = visible.shape[-1]
    if fill.shape != (d,):
        raise DimensionError(f"fill vector width {fill.shape} != row width {d}")
    two_d = visible.data.ndim == 2
    if two_d:
        if idx.ndim != 1:
            raise DimensionError(f"expected 1-d indices for 2-d input, got {idx.shape}")
        data = np.broadcast_to(fill.data, (n_rows, d)).copy()
        data[idx] = visible.data
    elif visible.data.ndim == 3:
        if idx.ndim != 2 or idx.shape[0] != visible.shape[0]:
            raise DimensionError(
                f"expected indices ({visible.shape[0]}, K) for input {visible.shape}, got {idx.shape}"
            )
        b = visible.shape[0]
        data = np.broadcast_to(fill.data, (b, n_rows, d)).copy()
        batch = np.arange(b)[:, None]
        data[batch, idx] = visible.data
    else:
        raise DimensionError(f"scatter_rows supports 2-d or 3-d input, got {visible.shape}")
    out = Tensor(data)

    def bwd(g):
        if two_d:
            gvis = g[idx]
            total = g.sum(axis=0)
            at_idx = gvis.sum(axis=0)
        else:
            batch = np.arange(visible.shape[0])[:, None]
            gvis = g[batch, idx]
            total = g.sum(axis=(0, 1))
            at_idx = gvis.sum(axis=(0, 1))
        return gvis, total - at_idx

    return _record(out, (visible, fill), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the leading axes; labels are ints."""
    lab = np.asarray(labels)
    if lab.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {lab.shape} do not match logits {logits.shape}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    flat_lab = lab.reshape(-1)
    flat_logp = logp.reshape(-1, logits.shape[-1])
    n = flat_lab.shape[0]
    nll = -flat_logp[np.arange(n), flat_lab].mean()
    out = Tensor(np.array([nll], dtype=logits.dtype))

    def bwd(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p.reshape(-1, logits.shape[-1]))
        onehot[np.arange(n), flat_lab] = 1.0
        grad = (p.reshape(-1, logits.shape[-1]) - onehot).reshape(logits.shape)
        return (grad * (g.reshape(-1)[0] / n),)

    return _record(out, (logits,), bwd)


# -- transformer block -------------------------------------------------------

def init_block_params(width: int, name: str, rng: np.random.Generator,
                      mlp_ratio: int = 4, dtype=np.float32) -> dict:
    """Parameters of one pre-norm attention block, keyed by f'{name}/...'."""
    def w(shape):
        return trunc_normal(rng, shape, std=0.02, dtype=dtype)

    hidden = mlp_ratio * width
    spec = {
        "ln1/g": np.ones(width, dtype=dtype),
        "ln1/b": np.zeros(width, dtype=dtype),
        "wq": w((width, width)), "bq": np.zeros(width, dtype=dtype),
        "wk": w((width, width)), "bk": np.zeros(width, dtype=dtype),
        "wv": w((width, width)), "bv": np.zeros(width, dtype=dtype),
        "wo": w((width, width)), "bo": np.zeros(width, dtype=dtype),
        "ln2/g": np.ones(width, dtype=dtype),
        "ln2/b": np.zeros(width, dtype=dtype),
        "w1": w((width, hidden)), "b1": np.zeros(hidden, dtype=dtype),
        "w2": w((hidden, width)), "b2": np.zeros(width, dtype=dtype),
    }
    return {f"{name}/{k}": Param(v, f"{name}/{k}", dtype=dtype) for k, v in spec.items()}


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2.0 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2.0 * std
    return vals.astype(dtype)


def _heads_split(x: Tensor, heads: int) -> Tensor:
    """(..., N, D) -> (..., heads, N, D/heads)."""
    lead = x.shape[:-2]
    n, d = x.shape[-2], x.shape[-1]
    x = reshape(x, lead + (n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return permute(x, axes)


def _heads_merge(x: Tensor) -> Tensor:
    """(..., heads, N, dh) -> (..., N, heads*dh)."""
    lead = x.shape[:-3]
    h, n, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    x = permute(x, axes)
    return reshape(x, lead + (n, h * dh))


def attention_block(tokens: Tensor, params: dict, name: str, heads: int) -> Tensor:
    """Pre-norm block: LN -> multi-head self-attention -> residual -> LN -> MLP -> residual.

    Joint space-time attention: every token attends to every token.
    """
    d = tokens.shape[-1]
    if tokens.shape[-2] < 1:
        raise ContractError("attention_block needs at least one token")
    if d % heads != 0:
        raise ConfigError(f"token width {d} is not divisible by heads {heads}")

    def p(key):
        return params[f"{name}/{key}"].value

    y = layer_norm(tokens, p("ln1/g"), p("ln1/b"))
    q = _heads_split(add(matmul(y, p("wq")), p("bq")), heads)
    k = _heads_split(add(matmul(y, p("wk")), p("bk")), heads)
    v = _heads_split(add(matmul(y, p("wv")), p("bv")), heads)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d / heads))
    attn = softmax(scores)
    ctx = _heads_merge(matmul(attn, v))
    h = add(tokens, add(matmul(ctx, p("wo")), p("bo")))

    y2 = layer_norm(h, p("ln2/g"), p("ln2/b"))
    m = gelu(add(matmul(y2, p("w1")), p("b1")))
    m = add(matmul(m, p("w2")), p("b2"))
    return add(h, m)


def attention_probs(tokens: np.ndarray, params: dict, name: str, heads: int) -> np.ndarray:
    """Forward-only attention weights (heads, N, N) for inspection/tests."""
    d = tokens.shape[-1]
    dh = d // heads

    def p(key):
        return params[f"{name}/{key}"].value.data

    mu = tokens.mean(-1, keepdims=True)
    xc = tokens - mu
    var = (xc * xc).mean(-1, keepdims=True)
    y = xc / np.sqrt(var + 1e-6) * p("ln1/g") + p("ln1/b")
    q = (y @ p("wq") + p("bq")).reshape(-1, heads, dh).transpose(1, 0, 2)
    k = (y @ p("wk") + p("bk")).reshape(-1, heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    scores -= scores.max(-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(-1, keepdims=True)


# -- gradient checking --------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Param],
                      h: float = 1e-5, samples_per_param: Optional[int] = None,
                      seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    f evaluates the scalar loss from the current parameter values; it is
    called under a fresh tape for the analytic pass and without a tape for
    the numeric probes. Run in float64: central differences at h=1e-5 are
    meaningless in float32. When samples_per_param is set, only that many
    randomly chosen entries of each parameter are probed (needed to keep
    whole-model checks tractable).

    Entries whose gradient is too small for central differences to resolve
    (discrepancy below the roundoff noise floor ~eps * |loss| / h, gradient
    within 1e4 of it) are skipped: structurally dead directions (a dead param,
    or a softmax-invariant bias shift) and true gradients near 1e-7 would
    otherwise report pure roundoff as large relative error.
    """
    if h <= 0:
        raise ContractError("finite_diff_check needs h > 0")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is non-finite at the evaluation point")
    analytic = {p.name: p.grad.copy() for p in params}
    # Central differences cannot resolve differences below roundoff in the
    # loss itself; discrepancies under this floor are indistinguishable
    # from zero.
    eps = float(np.finfo(np.float64).eps)
    noise_floor = 32.0 * eps * max(1.0, abs(loss.item())) / h

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.shape[0]
        if samples_per_param is None or samples_per_param >= n:
            entries = range(n)
        else:
            entries = rng.choice(n, size=samples_per_param, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            lp = f().item()
            flat[i] = orig - h
            lm = f().item()
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericError(f"non-finite evaluation while probing {p.name}[{i}]")
            numeric = (lp - lm) / (2.0 * h)
            a = float(a_flat[i])
            if (abs(a - numeric) < noise_floor
                    and max(abs(a), abs(numeric)) < 1e4 * noise_floor):
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
