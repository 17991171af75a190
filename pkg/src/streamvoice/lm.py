"""Context-aware causal language model over the semantic/acoustic cross-embedding.

Aligned semantic frames s_t and acoustic frames a_t are interleaved as
s_1, a_1, s_2, a_2, ... and run through a causal transformer. The hidden
state at each semantic position (h_t) is the one used to predict a_t; the
outputs at acoustic positions are discarded. A linear head turns h_t into a
context vector c_t trained to foresee the clean teacher semantics of frames
t..t+k, and the context-enhanced state is ``h + project(c)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .config import LmConfig
from .errors import ConfigError, DegenerateSequenceError, SequenceLengthError
from .numerics import ops
from .numerics.params import ParamStore
from .transformer import KVCache, Transformer


def bottleneck_dim(d: int, divisor: int) -> int:
    if d < divisor:
        raise ConfigError(f"bottleneck needs input dim >= {divisor}, got {d}")
    return d // divisor


def mask_semantic(n_frames: int, ratio: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Span-mask flags: each frame starts a masked span with prob ``ratio``.

    Spans are ``span`` frames long, may overlap and are clipped at the end.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    starts = np.flatnonzero(rng.random(n_frames) < ratio)
    flags = np.zeros(n_frames, dtype=bool)
    for s in starts:
        flags[s : s + span] = True
    return flags


def expected_mask_coverage(ratio: float, span: int) -> float:
    """Probability that a frame far from the sequence start is masked."""
    return 1.0 - (1.0 - ratio) ** span


def foresight_targets(teacher: np.ndarray, k: int) -> np.ndarray:
    """Rows t = 0..T-k-1 of concat(teacher[t], ..., teacher[t+k])."""
    t = teacher.shape[0]
    if t <= k:
        raise DegenerateSequenceError(f"foresight needs more than k={k} frames, got {t}")
    return np.concatenate([teacher[j : t - k + j] for j in range(k + 1)], axis=-1)


def foresight_loss(c: np.ndarray, teacher: np.ndarray, k: int, block_weights=None):
    """Mean over t of the squared distance between c_t and the teacher window.

    ``c`` holds T or T-k rows of width (k+1)*d; only the first T-k are used.
    ``block_weights`` (k+1 values) scale the current (index 0) and future
    blocks; used by the ablations. Returns (loss, dloss/dc shaped like c).
    """
    target = foresight_targets(teacher, k)
    n, width = target.shape
    if c.shape[0] < n or c.shape[1] != width:
        raise ValueError(f"context shape {c.shape} does not cover targets {target.shape}")
    diff = c[:n] - target
    d = width // (k + 1)
    w = np.ones(k + 1) if block_weights is None else np.asarray(block_weights, dtype=np.float64)
    wcol = np.repeat(w, d).astype(c.dtype)
    loss = float((wcol * diff * diff).sum() / n)
    grad = np.zeros_like(c)
    grad[:n] = (2.0 / n) * wcol * diff
    return loss, grad


@dataclass
class LmOutput:
    h: np.ndarray
    c: np.ndarray
    ch: np.ndarray


class ContextLM:
    def __init__(
        self,
        store: ParamStore,
        cfg: LmConfig,
        semantic_dim: int,
        codec_layers: int,
        codebook_size: int,
        rng: np.random.Generator,
        continuous_dim: int | None = None,
    ):
        self.store = store
        self.cfg = cfg
        self.semantic_dim = semantic_dim
        self.codec_layers = codec_layers
        self.codebook_size = codebook_size
        self.continuous = continuous_dim is not None
        d = cfg.hidden
        std = 0.02
        if cfg.use_bottleneck:
            self.sem_dim = bottleneck_dim(semantic_dim, cfg.bottleneck_divisor)
            scale = 1.0 / math.sqrt(semantic_dim)
            store.add("lm.bottleneck", rng.normal(0, scale, (semantic_dim, self.sem_dim)))
            # frozen map for the teacher targets of the context head
            store.add(
                "lm.teacher_bottleneck",
                rng.normal(0, scale, (semantic_dim, self.sem_dim)),
                trainable=False,
            )
        else:
            self.sem_dim = semantic_dim
        store.add("lm.mask_embed", rng.normal(0, 1.0, self.sem_dim))
        store.add("lm.sem_in.w", rng.normal(0, 1.0 / math.sqrt(self.sem_dim), (self.sem_dim, d)))
        store.add("lm.sem_in.b", np.zeros(d))
        if self.continuous:
            store.add("lm.ac_in.w", rng.normal(0, 1.0 / math.sqrt(continuous_dim), (continuous_dim, d)))
        else:
            e = cfg.acoustic_embed_dim
            for l in range(codec_layers):
                store.add(f"lm.ac_embed.{l}", rng.normal(0, 1.0, (codebook_size, e)))
            store.add("lm.ac_in.w", rng.normal(0, 1.0 / math.sqrt(codec_layers * e), (codec_layers * e, d)))
        store.add("lm.ac_in.b", np.zeros(d))
        self.trunk = Transformer(store, "lm.layers", cfg.layers, d, cfg.heads, cfg.intermediate, rng)
        self.ctx_dim = (cfg.foresight_k + 1) * self.sem_dim
        store.add("lm.ctx.w", rng.normal(0, std, (d, self.ctx_dim)))
        store.add("lm.ctx.b", np.zeros(self.ctx_dim))
        store.add("lm.ctx_proj.w", rng.normal(0, std, (self.ctx_dim, d)))
        store.add("lm.ctx_proj.b", np.zeros(d))

    # -- pieces -------------------------------------------------------------

    def bottleneck(self, s):
        if not self.cfg.use_bottleneck:
            return s, None
        return ops.linear(s, self.store["lm.bottleneck"])

    def teacher_targets(self, s_clean):
        """Teacher features mapped into the context-target space (no gradient)."""
        if not self.cfg.use_bottleneck:
            return np.asarray(s_clean, dtype=self.store.dtype)
        return np.asarray(s_clean, dtype=self.store.dtype) @ self.store["lm.teacher_bottleneck"].value

    def embed_semantic(self, s, mask=None):
        """Semantic features (n, d_s) -> (n, hidden); masked rows use [M]."""
        z, c_bn = self.bottleneck(np.asarray(s, dtype=self.store.dtype))
        if mask is not None and mask.any():
            z = z.copy()
            z[mask] = self.store["lm.mask_embed"].value
        e, c_in = ops.linear(z, self.store["lm.sem_in.w"], self.store["lm.sem_in.b"])
        return e, (c_bn, mask, c_in)

    def embed_acoustic(self, a):
        """Codes (n, L) -> (n, hidden): per-layer tables, concat, linear."""
        if self.continuous:
            return ops.linear(np.asarray(a, dtype=self.store.dtype), self.store["lm.ac_in.w"], self.store["lm.ac_in.b"])
        a = np.asarray(a)
        if a.ndim != 2 or a.shape[1] != self.codec_layers:
            raise ValueError(f"expected codes of shape (n, {self.codec_layers}), got {a.shape}")
        if np.any(a < 0) or np.any(a >= self.codebook_size):
            raise IndexError(f"codec token out of range for codebook of {self.codebook_size}")
        cat = np.concatenate([self.store[f"lm.ac_embed.{l}"].value[a[:, l]] for l in range(self.codec_layers)], axis=-1)
        e, c_in = ops.linear(cat, self.store["lm.ac_in.w"], self.store["lm.ac_in.b"])
        return e, (a, c_in)

    def _embed_semantic_backward(self, de, cache):
        c_bn, mask, c_in = cache
        dz = ops.linear_backward(de, c_in)
        if mask is not None and mask.any():
            self.store["lm.mask_embed"].grad += dz[mask].sum(axis=0)
            dz = dz.copy()
            dz[mask] = 0.0
        if c_bn is not None:
            ops.linear_backward(dz, c_bn)

    def _embed_acoustic_backward(self, de, cache):
        if self.continuous:
            ops.linear_backward(de, cache)
            return
        a, c_in = cache
        dcat = ops.linear_backward(de, c_in)
        e = self.cfg.acoustic_embed_dim
        for l in range(self.codec_layers):
            np.add.at(self.store[f"lm.ac_embed.{l}"].grad, a[:, l], dcat[:, l * e : (l + 1) * e])

    def context_head(self, h):
        c, c_c = ops.linear(h, self.store["lm.ctx.w"], self.store["lm.ctx.b"])
        p, c_p = ops.linear(c, self.store["lm.ctx_proj.w"], self.store["lm.ctx_proj.b"])
        return c, h + p, (c_c, c_p)

    def _context_head_backward(self, dh, dc, dch, cache):
        c_c, c_p = cache
        dh = dh + dch
        dc = dc + ops.linear_backward(dch, c_p)
        return dh + ops.linear_backward(dc, c_c)

    # -- full-sequence pass ------------------------------------------------

    def lookahead_index(self, n: int) -> np.ndarray:
        return np.minimum(np.arange(n) + self.cfg.lookahead, n - 1)

    def forward(self, s, a, mask=None, strict: bool = True):
        """Aligned s (T, d_s) and a (T, L) -> (LmOutput, saved activations)."""
        s = np.asarray(s)
        t = s.shape[0]
        if len(a) != t:
            raise ValueError(f"semantic ({t}) and acoustic ({len(a)}) streams must be aligned")
        if t == 0:
            raise DegenerateSequenceError("empty sequence")
        if 2 * t > self.cfg.max_positions:
            msg = f"interleaved length {2 * t} exceeds max_positions {self.cfg.max_positions}"
            if strict:
                raise SequenceLengthError(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        es, c_es = self.embed_semantic(s, mask)
        idx = self.lookahead_index(t)
        if self.cfg.lookahead:
            es = es[idx]
        ea, c_ea = self.embed_acoustic(a)
        x = np.empty((2 * t, self.cfg.hidden), dtype=self.store.dtype)
        x[0::2] = es
        x[1::2] = ea
        y, c_tr = self.trunk.forward(x)
        h = np.ascontiguousarray(y[0::2])
        c, ch, c_ctx = self.context_head(h)
        return LmOutput(h, c, ch), (c_es, idx, c_ea, c_tr, c_ctx, t)

    def backward(self, dc, dch, saved, dh=None):
        c_es, idx, c_ea, c_tr, c_ctx, t = saved
        dh = np.zeros_like(dch) if dh is None else dh
        dh = self._context_head_backward(dh, dc, dch, c_ctx)
        dy = np.zeros((2 * t, self.cfg.hidden), dtype=dch.dtype)
        dy[0::2] = dh
        dx = self.trunk.backward(dy, c_tr)
        des_shift = dx[0::2]
        if self.cfg.lookahead:
            des = np.zeros_like(des_shift)
            np.add.at(des, idx, des_shift)
        else:
            des = des_shift
        self._embed_semantic_backward(np.ascontiguousarray(des), c_es)
        self._embed_acoustic_backward(np.ascontiguousarray(dx[1::2]), c_ea)

    # -- incremental pass --------------------------------------------------

    def new_cache(self) -> KVCache:
        t = self.trunk
        return KVCache(t.n_layers, t.heads, t.head_dim, self.store.dtype)

    def step_semantic(self, cache: KVCache, s_frame) -> LmOutput:
        """Consume one (already look-ahead shifted) semantic frame; return h/c/ch."""
        e, _ = self.embed_semantic(np.asarray(s_frame)[None, :])
        y, _ = self.trunk.forward(e, start_pos=cache.length, cache=cache, keep=False)
        c, ch, _ = self.context_head(y)
        return LmOutput(y[0], c[0], ch[0])

    def prefill(self, cache: KVCache, s, a):
        """Consume aligned (already shifted) semantic/acoustic frame pairs in one pass."""
        es, _ = self.embed_semantic(np.asarray(s))
        ea, _ = self.embed_acoustic(a)
        x = np.empty((2 * len(es), self.cfg.hidden), dtype=self.store.dtype)
        x[0::2] = es
        x[1::2] = ea
        self.trunk.forward(x, start_pos=cache.length, cache=cache, keep=False)

    def step_acoustic(self, cache: KVCache, a_frame):
        """Consume one acoustic frame; its output is skipped."""
        e, _ = self.embed_acoustic(np.asarray(a_frame)[None, :])
        self.trunk.forward(e, start_pos=cache.length, cache=cache, keep=False)
