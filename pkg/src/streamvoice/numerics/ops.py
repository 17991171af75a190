"""Forward/backward pairs for every differentiable op the model uses.

Forward functions return ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache, accumulates parameter gradients
in place and returns the input gradient(s). Arrays may carry any number of
leading batch axes.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, NumericError
from . import _kernels as K
from .params import Parameter

RMS_EPS = 1e-5
ROPE_BASE = 10000.0


def _as_rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def linear(x: np.ndarray, w: Parameter, b: Parameter | None = None):
    """y = x @ W + b along the last axis; W is stored (in, out)."""
    if x.shape[-1] != w.value.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.shape} incompatible with weight shape {w.value.shape}"
        )
    y = x @ w.value
    if b is not None:
        if b.value.shape != (w.value.shape[1],):
            raise DimensionError(
                f"linear: bias shape {b.value.shape} incompatible with weight shape {w.value.shape}"
            )
        y = y + b.value
    return y, (x, w, b)


def linear_backward(dy, cache):
    x, w, b = cache
    w.grad += _as_rows(x).T @ _as_rows(dy)
    if b is not None:
        b.grad += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w.value.T


# ---------------------------------------------------------------------------
# rmsnorm
# ---------------------------------------------------------------------------


def rmsnorm(x, gain: Parameter, eps: float = RMS_EPS):
    rows = _as_rows(x)
    xhat, inv = K.rmsnorm_fwd(rows, eps)
    xhat = xhat.reshape(x.shape)
    return xhat * gain.value, (rows, xhat, inv, gain)


def rmsnorm_backward(dy, cache):
    rows, xhat, inv, gain = cache
    gain.grad += (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = _as_rows(dy * gain.value)
    return K.rmsnorm_bwd(dxhat, rows, inv).reshape(dy.shape)


# ---------------------------------------------------------------------------
# swiglu gate: silu(a) * b
# ---------------------------------------------------------------------------


def swiglu(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"swiglu: gate shape {a.shape} != value shape {b.shape}")
    ra, rb = _as_rows(a), _as_rows(b)
    return K.silu_mul_fwd(ra, rb).reshape(a.shape), (ra, rb, a.shape)


def swiglu_backward(dy, cache):
    ra, rb, shape = cache
    da, db = K.silu_mul_bwd(_as_rows(dy), ra, rb)
    return da.reshape(shape), db.reshape(shape)


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------


def rope_tables(positions, head_dim: int, dtype=np.float64, base: float = ROPE_BASE):
    if head_dim % 2:
        raise DimensionError(f"rope: head dim {head_dim} must be even")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x, positions):
    """Rotate x (..., N, dh) by the angles of absolute ``positions`` (N,)."""
    dh = x.shape[-1]
    cos, sin = rope_tables(positions, dh, x.dtype)
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-2], dh))
    out = K.rope(flat, cos, sin, 1).reshape(x.shape)
    return out, (cos, sin, x.shape)


def rope_backward(dy, cache):
    cos, sin, shape = cache
    flat = np.ascontiguousarray(dy.reshape(-1, shape[-2], shape[-1]))
    return K.rope(flat, cos, sin, -1).reshape(shape)


# ---------------------------------------------------------------------------
# causal attention
# ---------------------------------------------------------------------------


def causal_attention(q, k, v, start_pos: int = 0):
    """Scaled dot-product attention with an absolute causal mask.

    q is (..., Nq, dh) for absolute positions start_pos..start_pos+Nq-1;
    k, v are (..., Nk, dh) covering positions 0..Nk-1 (cached prefix
    included). Returns (out, cache) where cache holds the weights.
    """
    if start_pos < 0:
        raise ValueError(f"start_pos must be >= 0, got {start_pos}")
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} inconsistent")
    nq, dh = q.shape[-2:]
    nk = k.shape[-2]
    if start_pos + nq > nk:
        raise DimensionError(
            f"attention: {nq} queries from position {start_pos} need {start_pos + nq} keys, got {nk}"
        )
    scale = 1.0 / math.sqrt(dh)
    lead = q.shape[:-2]
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if not np.isfinite(scores).all():
        raise NumericError("attention: non-finite scores")
    probs = K.causal_softmax(np.ascontiguousarray(scores.reshape(-1, nq, nk)), start_pos)
    probs = probs.reshape(lead + (nq, nk))
    return probs @ v, (q, k, v, probs, scale)


def causal_attention_backward(dout, cache):
    q, k, v, probs, scale = cache
    nq, nk = probs.shape[-2:]
    dv = np.swapaxes(probs, -1, -2) @ dout
    dprobs = dout @ np.swapaxes(v, -1, -2)
    ds = K.softmax_backward(
        np.ascontiguousarray(probs.reshape(-1, nq, nk)),
        np.ascontiguousarray(dprobs.reshape(-1, nq, nk)),
    ).reshape(probs.shape)
    ds = ds * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


# ---------------------------------------------------------------------------
# softmax / losses
# ---------------------------------------------------------------------------


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target):
    """Negative log-probability of ``target`` under softmax(logits).

    Accepts a single logit vector with an int target, or (..., V) logits
    with an integer array of matching leading shape (returns per-item loss).
    """
    target = np.asarray(target)
    vocab = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {target.shape} vs logits {logits.shape}")
    if np.any(target < 0) or np.any(target >= vocab):
        raise IndexError(f"cross_entropy: target out of range for vocabulary of {vocab}")
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    return nll, (logp, target)


def cross_entropy_backward(dloss, cache):
    logp, target = cache
    g = np.exp(logp)
    np.put_along_axis(g, target[..., None], np.take_along_axis(g, target[..., None], -1) - 1.0, -1)
    return g * np.asarray(dloss)[..., None]


def mse_sum_mean(pred, target):
    """Squared L2 distance summed over the last axis, averaged over the rest."""
    diff = pred - target
    n = int(np.prod(diff.shape[:-1])) if diff.ndim > 1 else 1
    return float((diff * diff).sum() / n), (diff, n)


def mse_sum_mean_backward(dloss, cache):
    diff, n = cache
    return (2.0 * dloss / n) * diff
