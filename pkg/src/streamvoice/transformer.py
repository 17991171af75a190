"""Pre-norm causal transformer stack (RMSNorm, rotary or learned positions,
SwiGLU feed-forward) with a hand-written backward pass and a growable
key/value cache for incremental decoding."""

from __future__ import annotations

import math

import numpy as np

from .numerics import ops
from .numerics.params import ParamStore


class KVCache:
    """Per-layer key/value buffers of shape (heads, capacity, head_dim)."""

    def __init__(self, n_layers: int, heads: int, head_dim: int, dtype, capacity: int = 256):
        self.n_layers = n_layers
        self.heads = heads
        self.head_dim = head_dim
        self.dtype = np.dtype(dtype)
        self.length = 0
        self._k = [np.zeros((heads, capacity, head_dim), self.dtype) for _ in range(n_layers)]
        self._v = [np.zeros((heads, capacity, head_dim), self.dtype) for _ in range(n_layers)]
        self._pending = 0

    @property
    def capacity(self) -> int:
        return self._k[0].shape[1]

    def _grow(self, need: int):
        cap = self.capacity
        while cap < need:
            cap *= 2
        for lst in (self._k, self._v):
            for i, buf in enumerate(lst):
                new = np.zeros((self.heads, cap, self.head_dim), self.dtype)
                new[:, : self.length] = buf[:, : self.length]
                lst[i] = new

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        """Write n new positions for ``layer``; returns full (k, v) views."""
        n = k.shape[-2]
        end = self.length + n
        if end > self.capacity:
            self._grow(end)
        self._k[layer][:, self.length : end] = k
        self._v[layer][:, self.length : end] = v
        self._pending = n
        return self._k[layer][:, :end], self._v[layer][:, :end]

    def commit(self):
        self.length += self._pending
        self._pending = 0

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer][:, : self.length]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer][:, : self.length]

    def copy(self) -> "KVCache":
        out = KVCache(self.n_layers, self.heads, self.head_dim, self.dtype, self.capacity)
        out.length = self.length
        for i in range(self.n_layers):
            out._k[i][...] = self._k[i]
            out._v[i][...] = self._v[i]
        return out


class Transformer:
    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        n_layers: int,
        dim: int,
        heads: int,
        ffn: int,
        rng: np.random.Generator,
        use_rope: bool = True,
    ):
        self.store = store
        self.prefix = prefix
        self.n_layers = n_layers
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.ffn = ffn
        self.use_rope = use_rope
        std = 0.02
        out_std = std / math.sqrt(2 * n_layers)
        for i in range(n_layers):
            p = f"{prefix}.{i}"
            store.add(f"{p}.attn_norm", np.ones(dim))
            for name in ("wq", "wk", "wv"):
                store.add(f"{p}.{name}", rng.normal(0, std, (dim, dim)))
            store.add(f"{p}.wo", rng.normal(0, out_std, (dim, dim)))
            store.add(f"{p}.mlp_norm", np.ones(dim))
            store.add(f"{p}.w_gate", rng.normal(0, std, (dim, ffn)))
            store.add(f"{p}.w_up", rng.normal(0, std, (dim, ffn)))
            store.add(f"{p}.w_down", rng.normal(0, out_std, (ffn, dim)))
        store.add(f"{prefix}.final_norm", np.ones(dim))

    def _p(self, i, name):
        return self.store[f"{self.prefix}.{i}.{name}"]

    def _split(self, x):
        # (..., N, D) -> (..., H, N, dh)
        s = x.shape[:-1] + (self.heads, self.head_dim)
        return np.swapaxes(x.reshape(s), -2, -3)

    def _merge(self, x):
        x = np.swapaxes(x, -2, -3)
        return x.reshape(x.shape[:-2] + (self.dim,))

    def forward(self, x, start_pos: int = 0, cache: KVCache | None = None, keep: bool = True):
        """x (..., N, D) at absolute positions start_pos.. -> (y, acts).

        With a cache, keys/values of the N new positions are appended and
        attention sees the cached prefix. ``keep=False`` drops activations
        (inference only).
        """
        n = x.shape[-2]
        positions = np.arange(start_pos, start_pos + n)
        acts = []
        for i in range(self.n_layers):
            h, c_n1 = ops.rmsnorm(x, self._p(i, "attn_norm"))
            q, c_q = ops.linear(h, self._p(i, "wq"))
            k, c_k = ops.linear(h, self._p(i, "wk"))
            v, c_v = ops.linear(h, self._p(i, "wv"))
            q, k, v = self._split(q), self._split(k), self._split(v)
            c_rq = c_rk = None
            if self.use_rope:
                q, c_rq = ops.rope(q, positions)
                k, c_rk = ops.rope(k, positions)
            if cache is not None:
                k_all, v_all = cache.append(i, k, v)
                att, c_att = ops.causal_attention(q, k_all, v_all, start_pos)
            else:
                att, c_att = ops.causal_attention(q, k, v, 0)
            o, c_o = ops.linear(self._merge(att), self._p(i, "wo"))
            x = x + o
            h2, c_n2 = ops.rmsnorm(x, self._p(i, "mlp_norm"))
            a, c_a = ops.linear(h2, self._p(i, "w_gate"))
            b, c_b = ops.linear(h2, self._p(i, "w_up"))
            g, c_g = ops.swiglu(a, b)
            m, c_d = ops.linear(g, self._p(i, "w_down"))
            x = x + m
            if keep:
                acts.append((c_n1, c_q, c_k, c_v, c_rq, c_rk, c_att, c_o, c_n2, c_a, c_b, c_g, c_d))
        if cache is not None:
            cache.commit()
        y, c_f = ops.rmsnorm(x, self.store[f"{self.prefix}.final_norm"])
        return y, (acts, c_f)

    def backward(self, dy, saved):
        acts, c_f = saved
        dx = ops.rmsnorm_backward(dy, c_f)
        for i in reversed(range(self.n_layers)):
            c_n1, c_q, c_k, c_v, c_rq, c_rk, c_att, c_o, c_n2, c_a, c_b, c_g, c_d = acts[i]
            dg = ops.linear_backward(dx, c_d)
            da, db = ops.swiglu_backward(dg, c_g)
            dh2 = ops.linear_backward(da, c_a) + ops.linear_backward(db, c_b)
            dx = dx + ops.rmsnorm_backward(dh2, c_n2)
            datt = self._split(ops.linear_backward(dx, c_o))
            dq, dk, dv = ops.causal_attention_backward(datt, c_att)
            if self.use_rope:
                dq = ops.rope_backward(dq, c_rq)
                dk = ops.rope_backward(dk, c_rk)
            dh = (
                ops.linear_backward(self._merge(dq), c_q)
                + ops.linear_backward(self._merge(dk), c_k)
                + ops.linear_backward(self._merge(dv), c_v)
            )
            dx = dx + ops.rmsnorm_backward(dh, c_n1)
        return dx
