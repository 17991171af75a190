"""Per-frame acoustic predictor.

Maps the context-enhanced LM state of one frame to that frame's acoustic
features without looking at any other frame:

* discrete: a one-layer causal transformer over the L codec layers of the
  frame. Position 0 holds the projected LM state, position l holds the
  embedding of the layer-l token; position l-1 predicts layer l.
* continuous: a small stack of linear layers with SiLU in between, trained
  with squared error summed over feature dims and averaged over frames.
"""

from __future__ import annotations

import math

import numpy as np

from .config import PredictorConfig
from .errors import ConfigError
from .numerics import ops
from .numerics.params import ParamStore
from .transformer import Transformer


def _silu(x):
    ones = np.ones_like(x)
    y, cache = ops.swiglu(x, ones)
    return y, cache


def _silu_backward(dy, cache):
    return ops.swiglu_backward(dy, cache)[0]


class DiscretePredictor:
    def __init__(self, store: ParamStore, cfg: PredictorConfig, lm_hidden: int, layers: int, vocab: int, rng):
        if layers < 1 or vocab < 2:
            raise ConfigError(f"discrete predictor needs L >= 1 and V >= 2, got L={layers}, V={vocab}")
        self.store = store
        self.cfg = cfg
        self.layers = layers
        self.vocab = vocab
        p = cfg.hidden
        store.add("pred.in.w", rng.normal(0, 1.0 / math.sqrt(lm_hidden), (lm_hidden, p)))
        store.add("pred.in.b", np.zeros(p))
        for l in range(layers - 1):
            store.add(f"pred.tok_embed.{l}", rng.normal(0, 1.0, (vocab, p)))
        store.add("pred.pos", rng.normal(0, 0.02, (layers, p)))
        self.trunk = Transformer(store, "pred.layers", cfg.layers, p, cfg.heads, cfg.feedforward, rng, use_rope=False)
        store.add("pred.head.w", rng.normal(0, 0.02, (layers, p, vocab)))
        store.add("pred.head.b", np.zeros((layers, vocab)))

    def _inputs(self, ch, codes, n_pos):
        """Build (T, n_pos, P) inputs from ch (T, D) and codes (T, >= n_pos-1)."""
        start, c_in = ops.linear(ch, self.store["pred.in.w"], self.store["pred.in.b"])
        x = np.empty((ch.shape[0], n_pos, self.cfg.hidden), dtype=self.store.dtype)
        x[:, 0] = start
        for l in range(n_pos - 1):
            x[:, l + 1] = self.store[f"pred.tok_embed.{l}"].value[codes[:, l]]
        x += self.store["pred.pos"].value[:n_pos]
        return x, c_in

    def _heads(self, y):
        """y (T, n, P) -> logits (T, n, V) using the head of each position."""
        n = y.shape[1]
        w = self.store["pred.head.w"].value[:n]
        logits = np.matmul(np.swapaxes(y, 0, 1), w)  # (n, T, V)
        return np.swapaxes(logits, 0, 1) + self.store["pred.head.b"].value[:n]

    def forward_train(self, ch, codes):
        """Teacher-forced logits (T, L, V) for every codec layer of every frame."""
        codes = np.asarray(codes)
        if codes.shape != (ch.shape[0], self.layers):
            raise ValueError(f"codes shape {codes.shape} != ({ch.shape[0]}, {self.layers})")
        if np.any(codes < 0) or np.any(codes >= self.vocab):
            raise IndexError(f"codec token out of range for codebook of {self.vocab}")
        x, c_in = self._inputs(ch, codes, self.layers)
        y, c_tr = self.trunk.forward(x)
        return self._heads(y), (codes, c_in, y, c_tr)

    def backward(self, dlogits, saved):
        """Accumulate parameter grads; return dL/d(ch)."""
        codes, c_in, y, c_tr = saved
        st = self.store
        st["pred.head.b"].grad += dlogits.sum(axis=0)
        st["pred.head.w"].grad += np.matmul(np.swapaxes(y, 0, 1).transpose(0, 2, 1), np.swapaxes(dlogits, 0, 1))
        dy = np.swapaxes(np.matmul(np.swapaxes(dlogits, 0, 1), st["pred.head.w"].value.transpose(0, 2, 1)), 0, 1)
        dx = self.trunk.backward(np.ascontiguousarray(dy), c_tr)
        st["pred.pos"].grad += dx.sum(axis=0)
        for l in range(self.layers - 1):
            np.add.at(st[f"pred.tok_embed.{l}"].grad, codes[:, l], dx[:, l + 1])
        return ops.linear_backward(np.ascontiguousarray(dx[:, 0]), c_in)

    def loss(self, ch, codes):
        """Per-frame summed NLL averaged over frames, plus dL/dlogits."""
        logits, saved = self.forward_train(ch, codes)
        nll, c_ce = ops.cross_entropy(logits, saved[0])
        t = ch.shape[0]
        dlogits = ops.cross_entropy_backward(np.full(nll.shape, 1.0 / t, dtype=logits.dtype), c_ce)
        return float(nll.sum() / t), logits, dlogits, saved

    def decode_greedy(self, ch):
        """Greedy codes (n, L) and the logits that chose them (n, L, V).

        Layers are decoded in order, each conditioned on the tokens already
        chosen for the same frame; ties go to the lowest index.
        """
        ch = np.atleast_2d(ch)
        n = ch.shape[0]
        codes = np.zeros((n, self.layers), dtype=np.int64)
        logits = np.zeros((n, self.layers, self.vocab), dtype=self.store.dtype)
        for l in range(self.layers):
            x, _ = self._inputs(ch, codes, l + 1)
            y, _ = self.trunk.forward(x, keep=False)
            lg = self._head_at(y[:, l], l)
            logits[:, l] = lg
            codes[:, l] = np.argmax(lg, axis=-1)
        return codes, logits

    def _head_at(self, y_l, l):
        return y_l @ self.store["pred.head.w"].value[l] + self.store["pred.head.b"].value[l]


class ContinuousPredictor:
    def __init__(self, store: ParamStore, cfg: PredictorConfig, lm_hidden: int, out_dim: int, rng):
        self.store = store
        self.cfg = cfg
        self.out_dim = out_dim
        dims = [lm_hidden] * cfg.continuous_depth + [out_dim]
        for i in range(cfg.continuous_depth):
            store.add(f"pred.mlp.{i}.w", rng.normal(0, 1.0 / math.sqrt(dims[i]), (dims[i], dims[i + 1])))
            store.add(f"pred.mlp.{i}.b", np.zeros(dims[i + 1]))

    def forward(self, ch):
        caches = []
        x = ch
        depth = self.cfg.continuous_depth
        for i in range(depth):
            x, c_l = ops.linear(x, self.store[f"pred.mlp.{i}.w"], self.store[f"pred.mlp.{i}.b"])
            c_a = None
            if i < depth - 1:
                x, c_a = _silu(x)
            caches.append((c_l, c_a))
        return x, caches

    def backward(self, dy, caches):
        for c_l, c_a in reversed(caches):
            if c_a is not None:
                dy = _silu_backward(dy, c_a)
            dy = ops.linear_backward(dy, c_l)
        return dy

    def loss(self, ch, target):
        pred, caches = self.forward(ch)
        val, c_mse = ops.mse_sum_mean(pred, np.asarray(target, dtype=pred.dtype))
        return val, pred, ops.mse_sum_mean_backward(1.0, c_mse), caches

    def decode(self, ch):
        return self.forward(np.atleast_2d(ch))[0]
