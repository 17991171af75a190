"""Training loop, optimizer, evaluation and model-level gradient checks."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .data import Dataset, EvalPair
from .errors import NumericError
from .model import Prepared, StreamVoice
from .numerics.gradcheck import GradCheckReport, check_params
from .streaming import init_session, stream_all

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            if self.weight_decay and p.value.ndim >= 2:
                p.value -= lr * self.weight_decay * p.value
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_norm(params) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))


def clip_grads(params, max_norm: float) -> float:
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


@dataclass
class TrainResult:
    steps: int
    history: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    seconds: float = 0.0


class Trainer:
    def __init__(self, model: StreamVoice, data: Dataset, cfg: TrainConfig | None = None):
        self.model = model
        self.cfg = cfg or model.cfg.train
        self.data = data
        self.items: list[Prepared] = [model.prepare(u) for u in data.train]
        for i, it in enumerate(self.items):
            if len(it.s) > self.cfg.max_frames:
                raise ValueError(f"training utterance {i} has {len(it.s)} frames > max_frames {self.cfg.max_frames}")
        self.params = model.store.trainable()
        c = self.cfg
        self.opt = AdamW(self.params, c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay)
        self.rng = np.random.default_rng([c.seed, 7])
        self.step_no = 0
        self.block_weights = model.tf_block_weights(c.tf_current, c.tf_future)
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self.epoch = 0

    def _next_batch(self) -> list[int]:
        out = []
        while len(out) < self.cfg.batch_size:
            if self._cursor >= len(self._order):
                if len(self._order):
                    self.epoch += 1
                self._order = self.rng.permutation(len(self.items))
                self._cursor = 0
            out.append(int(self._order[self._cursor]))
            self._cursor += 1
        return out

    def lr(self) -> float:
        return self.cfg.lr * self.cfg.lr_decay**self.epoch

    def train_step(self, batch: list[int] | None = None) -> dict:
        """One optimizer update over a batch; returns batch-mean losses."""
        batch = self._next_batch() if batch is None else batch
        model, c = self.model, self.cfg
        model.store.zero_grad()
        totals = {"tf": 0.0, "acoustic": 0.0, "total": 0.0}
        scale = 1.0 / len(batch)
        for i in batch:
            item = self.items[i]
            mask = model.sample_mask(len(item.s), self.rng) if c.use_masking else None
            losses = model.loss(
                item, mask, block_weights=self.block_weights, tf_weight=c.tf_weight, grad_scale=scale
            )
            for k in totals:
                totals[k] += losses[k] * scale
        norm = clip_grads(self.params, c.grad_clip)
        if not all(np.isfinite(v) for v in totals.values()) or not np.isfinite(norm):
            raise NumericError(
                f"non-finite loss/gradient at step {self.step_no + 1}: seed={c.seed} batch={batch} losses={totals}"
            )
        lr = self.lr()
        self.opt.step(lr)
        self.step_no += 1
        totals.update(step=self.step_no, epoch=self.epoch, lr=lr, grad_norm=norm)
        return totals

    def run(self, steps: int | None = None, metrics_path: str | Path | None = None,
            callback: Callable[[dict], None] | None = None) -> TrainResult:
        steps = self.cfg.max_steps if steps is None else steps
        res = TrainResult(steps=steps)
        t0 = time.perf_counter()
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            window: list[dict] = []
            for _ in range(steps):
                rec = self.train_step()
                window.append(rec)
                if rec["step"] % self.cfg.log_every == 0 or rec["step"] == steps:
                    agg = {k: float(np.mean([w[k] for w in window])) for k in ("tf", "acoustic", "total", "grad_norm")}
                    agg.update(step=rec["step"], epoch=rec["epoch"], lr=rec["lr"], wall=time.perf_counter() - t0)
                    res.history.append(agg)
                    window = []
                    log.info("step %d  total %.4f  tf %.4f  ac %.4f  lr %.2e", agg["step"], agg["total"],
                             agg["tf"], agg["acoustic"], agg["lr"])
                    if fh:
                        fh.write(json.dumps(agg) + "\n")
                        fh.flush()
                    if callback:
                        callback(agg)
        finally:
            if fh:
                fh.close()
        res.seconds = time.perf_counter() - t0
        res.final = res.history[-1] if res.history else {}
        return res


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_pairs(model: StreamVoice, pairs: list[EvalPair], silence_frames: int, silence_feature) -> dict:
    """Teacher-forced greedy scoring of converted frames against the truth.

    Each pair is decoded as prompt + silence + source; the acoustic history
    is the ground truth, the current frame is the model's greedy choice.
    """
    if not pairs:
        return {}
    layers = model.cfg.task.codec_layers
    correct = np.zeros(layers)
    frames = 0
    sq_err = 0.0
    tf_vals = []
    for pair in pairs:
        p = model.prepare(pair.prompt)
        src = model.prepare(pair.source)
        sess = init_session(model, p.s, model.acoustic_input(p.target), silence_frames, silence_feature)
        pred = stream_all(sess, src.s, teacher=model.acoustic_input(src.target))
        if model.discrete:
            correct += (pred == src.target).sum(axis=0)
        else:
            sq_err += float(((pred - src.target) ** 2).sum())
        frames += len(src.target)
        if len(src.s) > model.cfg.lm.foresight_k:
            tf_vals.append(model.loss(src, None, backward=False, strict=False)["tf"])
    out = {"frames": frames, "tf_mse": float(np.mean(tf_vals)) if tf_vals else float("nan")}
    if model.discrete:
        acc = correct / max(frames, 1)
        out["acc_per_layer"] = acc.tolist()
        out["acc_mean"] = float(acc.mean())
        out["acc_min"] = float(acc.min())
    else:
        out["acoustic_mse"] = sq_err / max(frames, 1)
    return out


def evaluate(model: StreamVoice, data: Dataset, silence_frames: int | None = None) -> dict:
    silence_frames = model.cfg.stream.silence_frames if silence_frames is None else silence_frames
    sil = data.table[data.task.silence_token]
    out = {"seen": evaluate_pairs(model, data.eval_seen, silence_frames, sil)}
    if data.eval_unseen:
        out["unseen"] = evaluate_pairs(model, data.eval_unseen, silence_frames, sil)
    out["chance"] = 1.0 / model.cfg.task.codebook_size
    return out


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def grad_check(
    model: StreamVoice,
    sample: Prepared,
    eps: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 20,
    seed: int = 0,
    mask: np.ndarray | None = None,
    corrupt: dict[str, float] | None = None,
) -> GradCheckReport:
    """Central differences of L_total vs the analytic gradient, per tensor.

    Runs on a float64 copy of ``model``. ``corrupt`` scales named analytic
    gradients before comparison (fault injection).
    """
    m64 = model.clone(np.float64)
    rng = np.random.default_rng(seed)
    item = Prepared(sample.s.astype(np.float64), sample.s_clean.astype(np.float64), sample.target)
    if mask is None and m64.cfg.train.use_masking:
        mask = m64.sample_mask(len(item.s), rng)
        if not mask.any():
            mask[len(mask) // 2] = True
    bw = m64.tf_block_weights(m64.cfg.train.tf_current, m64.cfg.train.tf_future)
    tw = m64.cfg.train.tf_weight
    m64.store.zero_grad()
    m64.loss(item, mask, block_weights=bw, tf_weight=tw)
    grads = {p.name: p.grad.copy() for p in m64.store}
    for name, factor in (corrupt or {}).items():
        grads[name] = grads[name] * factor

    def f():
        return m64.loss(item, mask, block_weights=bw, tf_weight=tw, backward=False)["total"]

    return check_params(f, grads, m64.store.trainable(), n_coords=n_coords, eps=eps, tol=tol, rng=rng)
