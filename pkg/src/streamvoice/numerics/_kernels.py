"""Row-wise hot kernels with a numba path and a pure-numpy path.

Both implementations of every kernel are always importable under the
``nb_*`` / ``np_*`` names so tests and benchmarks can compare them. The
unprefixed names are bound to one path at import time:

    STREAMVOICE_NUMBA=0   force the numpy path
    STREAMVOICE_NUMBA=1   require numba (ImportError if missing)
    unset                 numba if importable, else numpy

All kernels take C-contiguous 2-D or 3-D arrays; callers reshape.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco if not args or not callable(args[0]) else args[0]


_flag = os.environ.get("STREAMVOICE_NUMBA", "").strip()
if _flag == "1" and not HAVE_NUMBA:
    raise ImportError("STREAMVOICE_NUMBA=1 but numba is not installed")
USE_NUMBA = HAVE_NUMBA and _flag != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def np_causal_softmax(scores, start_pos):
    """Masked softmax over the last axis of ``scores`` (B, Nq, Nk).

    Query row i sits at absolute position ``start_pos + i`` and may attend
    keys 0..start_pos+i. Masked entries come out exactly 0.
    """
    nq, nk = scores.shape[-2:]
    allowed = np.arange(nk)[None, :] <= (start_pos + np.arange(nq))[:, None]
    s = np.where(allowed, scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def np_softmax_backward(probs, dprobs):
    inner = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def np_rmsnorm_fwd(x, eps):
    """x (R, d) -> (x / rms, 1 / rms) with rms = sqrt(mean(x^2) + eps)."""
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1) + eps)
    return x * inv[:, None], inv.astype(x.dtype)


def np_rmsnorm_bwd(dxhat, x, inv):
    d = x.shape[-1]
    dot = (dxhat * x).sum(axis=-1)
    return inv[:, None] * dxhat - (inv**3 * dot / d)[:, None] * x


def np_silu_mul_fwd(a, b):
    sig = 1.0 / (1.0 + np.exp(-a))
    return a * sig * b


def np_silu_mul_bwd(dy, a, b):
    sig = 1.0 / (1.0 + np.exp(-a))
    silu = a * sig
    da = dy * b * (sig * (1.0 + a * (1.0 - sig)))
    db = dy * silu
    return da, db


def np_rope(x, cos, sin, sign):
    """Rotate adjacent pairs of x (B, N, dh) by per-position angles.

    cos/sin are (N, dh/2). sign=-1 applies the inverse rotation (backward).
    """
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    s = sign * sin
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * s
    out[..., 1::2] = x1 * s + x2 * cos
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@njit(cache=True)
def nb_causal_softmax(scores, start_pos):
    b_, nq, nk = scores.shape
    out = np.zeros_like(scores)
    for b in range(b_):
        for i in range(nq):
            lim = min(start_pos + i + 1, nk)
            m = -np.inf
            for j in range(lim):
                if scores[b, i, j] > m:
                    m = scores[b, i, j]
            tot = 0.0
            for j in range(lim):
                e = np.exp(scores[b, i, j] - m)
                out[b, i, j] = e
                tot += e
            for j in range(lim):
                out[b, i, j] = out[b, i, j] / tot
    return out


@njit(cache=True)
def nb_softmax_backward(probs, dprobs):
    b_, nq, nk = probs.shape
    out = np.empty_like(probs)
    for b in range(b_):
        for i in range(nq):
            inner = 0.0
            for j in range(nk):
                inner += probs[b, i, j] * dprobs[b, i, j]
            for j in range(nk):
                out[b, i, j] = probs[b, i, j] * (dprobs[b, i, j] - inner)
    return out


@njit(cache=True)
def nb_rmsnorm_fwd(x, eps):
    r, d = x.shape
    out = np.empty_like(x)
    inv = np.empty(r, dtype=x.dtype)
    for i in range(r):
        ss = 0.0
        for j in range(d):
            ss += x[i, j] * x[i, j]
        v = 1.0 / np.sqrt(ss / d + eps)
        inv[i] = v
        for j in range(d):
            out[i, j] = x[i, j] * v
    return out, inv


@njit(cache=True)
def nb_rmsnorm_bwd(dxhat, x, inv):
    r, d = x.shape
    out = np.empty_like(x)
    for i in range(r):
        dot = 0.0
        for j in range(d):
            dot += dxhat[i, j] * x[i, j]
        v = inv[i]
        coef = v * v * v * dot / d
        for j in range(d):
            out[i, j] = v * dxhat[i, j] - coef * x[i, j]
    return out


@njit(cache=True)
def nb_silu_mul_fwd(a, b):
    r, d = a.shape
    out = np.empty_like(a)
    for i in range(r):
        for j in range(d):
            sig = 1.0 / (1.0 + np.exp(-a[i, j]))
            out[i, j] = a[i, j] * sig * b[i, j]
    return out


@njit(cache=True)
def nb_silu_mul_bwd(dy, a, b):
    r, d = a.shape
    da = np.empty_like(a)
    db = np.empty_like(a)
    for i in range(r):
        for j in range(d):
            x = a[i, j]
            sig = 1.0 / (1.0 + np.exp(-x))
            da[i, j] = dy[i, j] * b[i, j] * (sig * (1.0 + x * (1.0 - sig)))
            db[i, j] = dy[i, j] * x * sig
    return da, db


@njit(cache=True)
def nb_rope(x, cos, sin, sign):
    b_, n, dh = x.shape
    out = np.empty_like(x)
    half = dh // 2
    for b in range(b_):
        for i in range(n):
            for p in range(half):
                c = cos[i, p]
                s = sign * sin[i, p]
                x1 = x[b, i, 2 * p]
                x2 = x[b, i, 2 * p + 1]
                out[b, i, 2 * p] = x1 * c - x2 * s
                out[b, i, 2 * p + 1] = x1 * s + x2 * c
    return out


if USE_NUMBA:
    causal_softmax = nb_causal_softmax
    softmax_backward = nb_softmax_backward
    rmsnorm_fwd = nb_rmsnorm_fwd
    rmsnorm_bwd = nb_rmsnorm_bwd
    silu_mul_fwd = nb_silu_mul_fwd
    silu_mul_bwd = nb_silu_mul_bwd
    rope = nb_rope
else:
    causal_softmax = np_causal_softmax
    softmax_backward = np_softmax_backward
    rmsnorm_fwd = np_rmsnorm_fwd
    rmsnorm_bwd = np_rmsnorm_bwd
    silu_mul_fwd = np_silu_mul_fwd
    silu_mul_bwd = np_silu_mul_bwd
    rope = np_rope
