"""Full model: context LM + acoustic predictor, loss assembly, checkpoints.

Checkpoint container (``.npz``): every parameter under its dotted name plus
``__meta__``, a JSON string ``{"format": "streamvoice-checkpoint",
"format_version": 1, "config": <RunConfig dict>, "dtype": "float32"}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Utterance, align, codes_to_latents, continuous_codebooks
from .errors import CheckpointVersionError, NumericError
from .lm import ContextLM, foresight_loss, mask_semantic
from .numerics.params import ParamStore
from .predictor import ContinuousPredictor, DiscretePredictor

CHECKPOINT_FORMAT = "streamvoice-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Prepared:
    """One utterance aligned to the acoustic frame rate."""

    s: np.ndarray  # corrupted (streaming) semantic features, (T, d_s)
    s_clean: np.ndarray  # clean teacher features, (T, d_s)
    target: np.ndarray  # codes (T, L) or latents (T, D)


class StreamVoice:
    def __init__(self, cfg: RunConfig, dtype=None, seed: int | None = None):
        self.cfg = cfg
        dtype = np.dtype(dtype or cfg.train.dtype)
        self.store = ParamStore(dtype)
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 101])
        task = cfg.task
        self.discrete = cfg.predictor.mode == "discrete"
        self.lm = ContextLM(
            self.store,
            cfg.lm,
            task.semantic_dim,
            task.codec_layers,
            task.codebook_size,
            rng,
            continuous_dim=None if self.discrete else task.continuous_dim,
        )
        if self.discrete:
            self.predictor = DiscretePredictor(
                self.store, cfg.predictor, cfg.lm.hidden, task.codec_layers, task.codebook_size, rng
            )
        else:
            self.predictor = ContinuousPredictor(self.store, cfg.predictor, cfg.lm.hidden, task.continuous_dim, rng)
            self._books = continuous_codebooks(task)

    @property
    def dtype(self):
        return self.store.dtype

    # -- data plumbing -----------------------------------------------------

    def prepare(self, utt: Utterance) -> Prepared:
        r = self.cfg.task.frame_ratio
        s, codes = align(utt.corrupted_features, utt.codes, r)
        s_clean, _ = align(utt.clean_features, utt.codes, r)
        target = codes if self.discrete else codes_to_latents(codes, self._books)
        return Prepared(s.astype(self.dtype), s_clean.astype(self.dtype), target)

    def acoustic_input(self, target):
        """What the LM consumes as the acoustic frame (codes or latents)."""
        return target if self.discrete else np.asarray(target, dtype=self.dtype)

    def sample_mask(self, n_frames: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.cfg.lm.mask_ratio
        ratio = float(rng.uniform(lo, hi)) if hi > lo else lo
        return mask_semantic(n_frames, ratio, self.cfg.lm.mask_span, rng)

    def tf_block_weights(self, tf_current: bool = True, tf_future: bool = True) -> np.ndarray:
        k = self.cfg.lm.foresight_k
        w = np.ones(k + 1)
        w[0] = 1.0 if tf_current else 0.0
        w[1:] = 1.0 if tf_future else 0.0
        return w

    # -- losses ------------------------------------------------------------

    def loss(
        self,
        item: Prepared,
        mask: np.ndarray | None = None,
        *,
        block_weights=None,
        tf_weight: float = 1.0,
        backward: bool = True,
        grad_scale: float = 1.0,
        strict: bool = True,
    ) -> dict[str, float]:
        """Forward (and optionally backward) for one utterance.

        Returns {"tf", "acoustic", "total"}; total = tf_weight*tf + acoustic.
        Gradients are accumulated into the parameter store scaled by
        ``grad_scale``.
        """
        out, saved = self.lm.forward(item.s, self.acoustic_input(item.target), mask, strict=strict)
        teacher = self.lm.teacher_targets(item.s_clean)
        l_tf, dc = foresight_loss(out.c, teacher, self.cfg.lm.foresight_k, block_weights)
        if self.discrete:
            l_ac, _, dlogits, psaved = self.predictor.loss(out.ch, item.target)
        else:
            l_ac, _, dpred, psaved = self.predictor.loss(out.ch, item.target)
        total = tf_weight * l_tf + l_ac
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss (tf={l_tf}, acoustic={l_ac})")
        if backward:
            if self.discrete:
                dch = self.predictor.backward(dlogits * grad_scale, psaved)
            else:
                dch = self.predictor.backward(dpred * grad_scale, psaved)
            self.lm.backward((tf_weight * grad_scale) * dc, dch, saved)
        return {"tf": l_tf, "acoustic": l_ac, "total": total}

    # -- offline inference -------------------------------------------------

    def context_states(self, s, a, strict: bool = False):
        out, _ = self.lm.forward(s, self.acoustic_input(a), None, strict=strict)
        return out

    def decode(self, ch):
        """Greedy acoustic frames for ch (n, D): (codes, logits) or (latents, None)."""
        if self.discrete:
            return self.predictor.decode_greedy(ch)
        return self.predictor.decode(ch), None

    # -- checkpoints -------------------------------------------------------

    def save(self, path: str | Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "dtype": self.dtype.name,
        }
        arrays = self.store.state_dict()
        with open(path, "wb") as f:
            np.savez(f, __meta__=np.array(json.dumps(meta)), **arrays)
        return path

    @classmethod
    def load(cls, path: str | Path, expect: RunConfig | None = None) -> "StreamVoice":
        with np.load(path, allow_pickle=False) as z:
            if "__meta__" not in z.files:
                raise CheckpointVersionError(f"{path}: missing checkpoint header")
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('format_version')}"
                )
            cfg = RunConfig.from_dict(meta["config"])
            if expect is not None and not compatible(cfg, expect):
                raise CheckpointVersionError(f"{path}: checkpoint architecture does not match the config")
            model = cls(cfg, dtype=meta["dtype"])
            model.store.load_state_dict({k: z[k] for k in z.files if k != "__meta__"})
        return model

    def clone(self, dtype=None) -> "StreamVoice":
        m = StreamVoice(self.cfg, dtype=dtype or self.dtype)
        m.store.load_state_dict(self.store.state_dict())
        return m


def compatible(a: RunConfig, b: RunConfig) -> bool:
    """Same architecture and task shape (what a checkpoint depends on)."""
    keys = ("semantic_vocab", "codec_layers", "codebook_size", "semantic_dim", "continuous_dim")
    return (
        a.lm == b.lm
        and a.predictor == b.predictor
        and all(getattr(a.task, k) == getattr(b.task, k) for k in keys)
    )
