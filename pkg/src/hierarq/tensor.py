"""Minimal dense tensor kernel with reverse-mode autodiff.

numpy holds the raw arrays; everything differentiable goes through the op
functions in this module so a GradientTape can replay them backwards. The
kernel is deliberately small: exactly the operations the model needs, each
with a hand-written vector-Jacobian product, each checked for finiteness on
the way out (a NaN or Inf is an error state, never a silent value).

Conventions:
  * the last axis is the feature axis; softmax_rows and layer_norm act on it
  * matmul contracts the last axis of ``a`` with the second-to-last of ``b``;
    leading (batch) axes must match exactly, no implicit broadcasting there
  * elementwise ops broadcast like numpy and un-broadcast their gradients
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericalError

DTYPES = {"f32": np.float32, "f64": np.float64}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def resolve_dtype(precision: str) -> np.dtype:
    if precision not in DTYPES:
        raise DimensionError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")
    return np.dtype(DTYPES[precision])


class Tensor:
    """A dense array plus autodiff bookkeeping.

    ``data`` is always a C-contiguous float32 or float64 ndarray. ``grad``
    is populated by GradientTape.backward for tensors that require grad.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: would promote 0-d, hence the guard
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no gradient linkage. Used when memory banks freeze history."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape: Sequence[int], std: float = 1.0,
          dtype=np.float32, requires_grad: bool = False) -> Tensor:
    data = (rng.standard_normal(tuple(shape)) * std).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


# --------------------------------------------------------------------------
# tape machinery

_TAPE_STACK: list["GradientTape"] = []


class GradientTape:
    """Records op executions; backward replays them in reverse order once.

    Usage::

        with GradientTape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    After backward, every requires_grad leaf reachable from the loss has its
    ``grad`` populated (accumulated if already set).
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise DimensionError("loss does not depend on any tensor that requires grad")
        # pending grads keyed by tensor identity; entries consumed newest-first
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self._entries):
            g = pending.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue  # dead branch: this output never reached the loss
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                    holders[key] = t
        # whatever is left was never produced by a recorded op: the leaves
        for key, g in pending.items():
            leaf = holders[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    # one cheap reduction; NaN/Inf always propagate into the sum. The full
    # sweep runs only to rule out overflow of the sum itself.
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape._entries.append((out, inputs, vjp))
    return out


def _check_same_dtype(op: str, *ts: Tensor) -> None:
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise DimensionError(f"{op}: mixed dtypes {d0} and {t.data.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    ad, bd = a.data, b.data
    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
    return _result("mul", ad * bd, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    cc = a.data.dtype.type(c)
    return _result("scale", a.data * cc, (a,), lambda g: (g * cc,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf
    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf).astype(x.dtype),)
    return _result("gelu", out.astype(x.dtype), (a,), vjp)


# --------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _result("permute", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def transpose_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    _check_same_dtype("concat", *parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def vjp(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(sl)])
        return tuple(outs)
    return _result("concat", np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def slice0(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0 (memory-bank eviction uses this)."""
    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)
    return _result("slice0", a.data[start:stop].copy(), (a,), vjp)


def expand0(a: Tensor, n: int) -> Tensor:
    """Repeat a leading size-1 axis n times."""
    if a.shape[0] != 1:
        raise DimensionError(f"expand0 needs a leading axis of 1, got {a.shape}")
    def vjp(g):
        return (g.sum(axis=0, keepdims=True),)
    return _result("expand0", np.repeat(a.data, n, axis=0), (a,), vjp)


# --------------------------------------------------------------------------
# contractions and reductions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes must match exactly: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    def vjp(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g
    return _result("matmul", ad @ bd, (a, b), vjp)


def reduce_sum(a: Tensor, axes: Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes_t = tuple(range(a.ndim)) if axes is None else tuple(ax % a.ndim for ax in axes)
    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
    return _result("reduce_sum", a.data.sum(axis=axes_t, keepdims=keepdims), (a,), vjp)


def reduce_mean(a: Tensor, axes: Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes_t = tuple(range(a.ndim)) if axes is None else tuple(ax % a.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes_t]))
    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype, copy=True),)
    return _result("reduce_mean", a.data.mean(axis=axes_t, keepdims=keepdims), (a,), vjp)


def slot_mix(weights: np.ndarray, entries: Tensor) -> Tensor:
    """Per-slot linear recombination of stacked bank entries.

    ``entries`` is (S_old, B, N, D); ``weights`` is a constant
    (S_new, S_old, B, N) selection/averaging matrix. Output entry s, slot n is
    sum_o weights[s, o, b, n] * entries[o, b, n, :]. Memory-bank compression
    expresses both token-level and frame-level merging this way.
    """
    if weights.shape[1:] != entries.shape[:-1]:
        raise DimensionError(f"slot_mix weights {weights.shape} do not match entries {entries.shape}")
    w = weights.astype(entries.data.dtype, copy=False)
    # contract over S_old with batched matmuls: (B,N,S,O) @ (B,N,O,D)
    wt = w.transpose(2, 3, 0, 1)
    def vjp(g):
        grad = np.matmul(wt.transpose(0, 1, 3, 2), g.transpose(1, 2, 0, 3))
        return (grad.transpose(2, 0, 1, 3),)
    out = np.matmul(wt, entries.data.transpose(1, 2, 0, 3)).transpose(2, 0, 1, 3)
    return _result("slot_mix", np.ascontiguousarray(out), (entries,), vjp)


# --------------------------------------------------------------------------
# normalization and attention

def softmax_rows(a: Tensor) -> Tensor:
    """Stable softmax along the last axis (row-wise for matrices)."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _result("softmax_rows", y, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype("layer_norm", x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data
    def vjp(g):
        gg = g * gain.data
        gx = (gg - gg.mean(axis=-1, keepdims=True)
              - xhat * (gg * xhat).mean(axis=-1, keepdims=True)) * inv
        red = tuple(range(g.ndim - 1))
        return gx.astype(xd.dtype), (g * xhat).sum(axis=red), g.sum(axis=red)
    return _result("layer_norm", out.astype(xd.dtype), (x, gain, bias), vjp)


@dataclass
class AttentionWeights:
    """Projections for one multi-head attention block, all d x d, no biases."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise DimensionError(f"attention weight {name} must be ({d},{d}), got {w.shape}")


def _project(x: Tensor, w: Tensor) -> Tensor:
    """Apply a (d_in, d_out) weight to the last axis of x."""
    lead = x.shape[:-1]
    flat = reshape(x, (int(np.prod(lead)), x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    return reshape(out, lead + (w.shape[-1],)) if x.ndim != 2 else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, l, d = x.shape
    return permute(reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                         w: AttentionWeights, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with per-head splitting.

    Accepts (L, d) or (B, L, d) inputs; returns (out, attn) where attn holds
    the post-softmax weights, shape (heads, L_q, L_k) or (B, heads, L_q, L_k).
    Scores are scaled by 1/sqrt(d/heads).
    """
    d = w.wq.shape[0]
    if q_in.shape[-1] != d or k_in.shape[-1] != d or v_in.shape[-1] != d:
        raise DimensionError(f"attention inputs must end in d={d}, got "
                             f"{q_in.shape}/{k_in.shape}/{v_in.shape}")
    if d % heads != 0:
        raise DimensionError(f"heads={heads} must divide d={d}")
    flat_in = q_in.ndim == 2
    if flat_in:
        q_in = reshape(q_in, (1,) + q_in.shape)
        k_in = reshape(k_in, (1,) + k_in.shape)
        v_in = reshape(v_in, (1,) + v_in.shape)
    if k_in.shape[:-2] != q_in.shape[:-2] or v_in.shape != k_in.shape:
        raise DimensionError("attention batch axes must agree between q/k/v")

    dh = d // heads
    qh = _split_heads(_project(q_in, w.wq), heads)
    kh = _split_heads(_project(k_in, w.wk), heads)
    vh = _split_heads(_project(v_in, w.wv), heads)
    scores = scale(matmul(qh, transpose_last2(kh)), 1.0 / math.sqrt(dh))
    attn = softmax_rows(scores)                       # (B, heads, L_q, L_k)
    ctx = matmul(attn, vh)                            # (B, heads, L_q, dh)
    b, _, lq, _ = ctx.shape
    merged = reshape(permute(ctx, (0, 2, 1, 3)), (b, lq, d))
    out = _project(merged, w.wo)
    if flat_in:
        out = reshape(out, out.shape[1:])
        attn = reshape(attn, attn.shape[1:])
    return out, attn


# --------------------------------------------------------------------------
# losses

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy over all leading positions of (.., C) logits."""
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    flatp = logp.reshape(-1, x.shape[-1])
    flatl = lab.reshape(-1)
    n = flatl.shape[0]
    picked = flatp[np.arange(n), flatl]
    loss = -picked.mean()
    def vjp(g):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft).reshape(-1, x.shape[-1])
        onehot[np.arange(n), flatl] = 1.0
        gx = (soft - onehot.reshape(soft.shape)) * (g.reshape(()) / n)
        return (gx.astype(x.dtype),)
    return _result("cross_entropy", np.asarray(loss, dtype=x.dtype), (logits,), vjp)


# --------------------------------------------------------------------------
# non-differentiable utilities

def cosine_similarity(a, b) -> float:
    """Cosine of two 1-d vectors; 0.0 if either is all-zero; clamped to [-1, 1]."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b)
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise DimensionError(f"cosine_similarity needs matching 1-d vectors, got {av.shape}/{bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = float(av @ bv) / (na * nb + 1e-12)
    return max(-1.0, min(1.0, c))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               max_entries_per_param: int | None = None, sample_seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    loss. All parameters must be float64; the relative error for one entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    By default every entry of every parameter is probed. For large models,
    ``max_entries_per_param`` caps the probes per tensor to a deterministic
    random subset (seeded by ``sample_seed``); every tensor is still visited.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise DimensionError("grad_check requires float64 parameters")
        p.grad = None
    with GradientTape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for index, (p, an) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        entries = np.arange(flat.shape[0])
        if max_entries_per_param is not None and flat.shape[0] > max_entries_per_param:
            picker = np.random.default_rng([sample_seed, index])
            entries = picker.choice(flat.shape[0], size=max_entries_per_param,
                                    replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            rel = abs(aflat[i] - num) / max(1e-8, abs(aflat[i]) + abs(num))
            if rel > worst:
                worst = rel
    return worst
