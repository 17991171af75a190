"""Synthetic recognition-synthesis task.

Stands in for the ASR-feature / codec-token pipeline. Each utterance has a
sequence of clean semantic tokens, their frozen random embeddings (the
clean teacher features), a corrupted copy imitating a weaker streaming
recogniser, and speaker-dependent codec tokens at ``frame_ratio`` times the
semantic frame rate:

    code[t, l] = (tok[ceil(t / rho)] * (l + 1) + speaker * prime[l]) mod V

for acoustic frame t = 1..T_a and codec layer l = 1..L. The speaker term
means the right codes can only be produced by picking the speaker up from
context (the prompt or the acoustic history).

On-disk layout (``write_dataset``)::

    meta.json            {"format": "streamvoice-dataset", "version": 1,
                          "task": {...}, "prompt_frames": int,
                          "feature_table": [[...], ...]}
    train.jsonl          one utterance record per line
    eval_seen.jsonl      one {"prompt": rec, "source": rec} pair per line
    eval_unseen.jsonl    same, speakers disjoint from train.jsonl

An utterance record is ``{"speaker": int, "clean_tokens": [...],
"corrupted_tokens": [...], "codes": [[...L ints], ...]}``. Features are
rebuilt from ``feature_table``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TaskConfig
from .errors import ConfigError

DATASET_FORMAT = "streamvoice-dataset"
DATASET_VERSION = 1

_KEY_TABLE = 11
_KEY_CODEBOOK = 12
_KEY_TRAIN = 21
_KEY_EVAL_SEEN = 22
_KEY_EVAL_UNSEEN = 23


def task_rng(cfg: TaskConfig, key: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, key])


def feature_table(cfg: TaskConfig) -> np.ndarray:
    """Frozen unit-variance embedding per semantic token (+ the silence row)."""
    return task_rng(cfg, _KEY_TABLE).standard_normal((cfg.semantic_vocab + 1, cfg.semantic_dim))


def continuous_codebooks(cfg: TaskConfig) -> np.ndarray:
    """(L, V, D) codebooks turning a code tuple into a summed latent vector."""
    rng = task_rng(cfg, _KEY_CODEBOOK)
    scale = 1.0 / np.sqrt(cfg.codec_layers)
    return rng.standard_normal((cfg.codec_layers, cfg.codebook_size, cfg.continuous_dim)) * scale


def codes_to_latents(codes: np.ndarray, books: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    out = np.zeros(codes.shape[:-1] + (books.shape[-1],))
    for layer in range(books.shape[0]):
        out += books[layer][codes[..., layer]]
    return out


@dataclass
class Utterance:
    speaker: int
    clean_tokens: np.ndarray
    corrupted_tokens: np.ndarray
    clean_features: np.ndarray
    corrupted_features: np.ndarray
    codes: np.ndarray

    @property
    def n_semantic(self) -> int:
        return len(self.clean_tokens)

    @property
    def n_acoustic(self) -> int:
        return len(self.codes)

    def to_record(self) -> dict:
        return {
            "speaker": int(self.speaker),
            "clean_tokens": self.clean_tokens.tolist(),
            "corrupted_tokens": self.corrupted_tokens.tolist(),
            "codes": self.codes.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict, table: np.ndarray) -> "Utterance":
        clean = np.asarray(rec["clean_tokens"], dtype=np.int64)
        corrupted = np.asarray(rec["corrupted_tokens"], dtype=np.int64)
        codes = np.asarray(rec["codes"], dtype=np.int64)
        if codes.ndim == 1:
            codes = codes.reshape(len(codes), -1)
        return cls(int(rec["speaker"]), clean, corrupted, table[clean], table[corrupted], codes)


@dataclass
class EvalPair:
    prompt: Utterance
    source: Utterance


@dataclass
class Dataset:
    task: TaskConfig
    table: np.ndarray
    train: list[Utterance]
    eval_seen: list[EvalPair]
    eval_unseen: list[EvalPair]
    prompt_frames: int


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def codec_tokens(tokens: np.ndarray, speaker: int, cfg: TaskConfig) -> np.ndarray:
    """Codes for already-aligned (acoustic-rate) clean tokens -> (T_a, L)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    mult = np.arange(2, cfg.codec_layers + 2, dtype=np.int64)
    primes = np.asarray(cfg.codec_primes, dtype=np.int64)
    return (tokens[:, None] * mult[None, :] + speaker * primes[None, :]) % cfg.codebook_size


def corrupt_semantic(tokens, p_sub: float, rng: np.random.Generator, vocab: int) -> np.ndarray:
    """With probability p_sub, replace a token by a different uniform token.

    Drawing from the other vocab - 1 tokens makes every substitution
    observable, so the changed fraction estimates p_sub directly. Tokens
    outside [0, vocab) (the silence id) are replaced by ordinary tokens.
    """
    if not 0.0 <= p_sub < 1.0:
        raise ConfigError(f"p_sub must satisfy 0 <= p_sub < 1, got {p_sub}")
    tokens = np.asarray(tokens, dtype=np.int64)
    hit = rng.random(tokens.shape) < p_sub
    shift = rng.integers(1, vocab, size=tokens.shape)
    fresh = rng.integers(0, vocab, size=tokens.shape)
    repl = np.where(tokens < vocab, (tokens + shift) % vocab, fresh)
    return np.where(hit, repl, tokens)


def align(s: np.ndarray, a: np.ndarray, ratio: int) -> tuple[np.ndarray, np.ndarray]:
    """Repeat each semantic frame ``ratio`` times to match the acoustic rate.

    Trailing frames that do not fill a whole semantic frame are dropped from
    whichever stream is longer.
    """
    if ratio < 1:
        raise ConfigError(f"frame ratio must be >= 1, got {ratio}")
    n = min(len(s), len(a) // ratio)
    return np.repeat(s[:n], ratio, axis=0), a[: n * ratio]


def gen_utterance(
    cfg: TaskConfig,
    speaker: int,
    rng: np.random.Generator,
    table: np.ndarray | None = None,
    n_semantic: int | None = None,
) -> Utterance:
    if not 0 <= speaker < cfg.speakers:
        raise ConfigError(f"speaker {speaker} out of range for {cfg.speakers} speakers")
    if table is None:
        table = feature_table(cfg)
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1)) if n_semantic is None else int(n_semantic)
    edge = min(cfg.silence_edge_max, max(0, (n - 1) // 2))
    lead = int(rng.integers(0, edge + 1))
    trail = int(rng.integers(0, edge + 1))
    content = rng.integers(0, cfg.semantic_vocab, size=n - lead - trail)
    sil = cfg.silence_token
    clean = np.concatenate([np.full(lead, sil), content, np.full(trail, sil)]).astype(np.int64)
    corrupted = corrupt_semantic(clean, cfg.p_sub, rng, cfg.semantic_vocab)
    codes = codec_tokens(np.repeat(clean, cfg.frame_ratio), speaker, cfg)
    return Utterance(speaker, clean, corrupted, table[clean], table[corrupted], codes)


def build_dataset(cfg: TaskConfig, prompt_frames: int = 150) -> Dataset:
    cfg.validate()
    table = feature_table(cfg)
    rng = task_rng(cfg, _KEY_TRAIN)
    speakers = cfg.train_speakers
    train = [
        gen_utterance(cfg, speakers[int(rng.integers(len(speakers)))], rng, table)
        for _ in range(cfg.n_train)
    ]
    prompt_sem = max(1, prompt_frames // cfg.frame_ratio)

    def pairs(key, spk_ids):
        r = task_rng(cfg, key)
        out = []
        for i in range(cfg.n_eval):
            spk = spk_ids[i % len(spk_ids)]
            prompt = gen_utterance(cfg, spk, r, table, n_semantic=prompt_sem)
            n_src = int(r.integers(cfg.eval_min_len, cfg.eval_max_len + 1))
            source = gen_utterance(cfg, spk, r, table, n_semantic=n_src)
            out.append(EvalPair(prompt, source))
        return out

    seen = pairs(_KEY_EVAL_SEEN, cfg.train_speakers)
    unseen = pairs(_KEY_EVAL_UNSEEN, cfg.unseen_speaker_ids) if cfg.unseen_speakers else []
    return Dataset(cfg, table, train, seen, unseen, prompt_frames)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    import dataclasses

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "task": dataclasses.asdict(ds.task),
        "prompt_frames": ds.prompt_frames,
        "feature_table": ds.table.tolist(),
    }
    (out / "meta.json").write_text(json.dumps(meta))
    with open(out / "train.jsonl", "w") as f:
        for u in ds.train:
            f.write(json.dumps(u.to_record()) + "\n")
    for name, items in (("eval_seen", ds.eval_seen), ("eval_unseen", ds.eval_unseen)):
        with open(out / f"{name}.jsonl", "w") as f:
            for p in items:
                f.write(json.dumps({"prompt": p.prompt.to_record(), "source": p.source.to_record()}) + "\n")
    return out


def read_dataset(in_dir: str | Path) -> Dataset:
    d = Path(in_dir)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format") != DATASET_FORMAT or meta.get("version") != DATASET_VERSION:
        raise ConfigError(f"{d}: not a version-{DATASET_VERSION} {DATASET_FORMAT}")
    task = TaskConfig(**meta["task"])
    table = np.asarray(meta["feature_table"], dtype=np.float64)

    def lines(name):
        with open(d / f"{name}.jsonl") as f:
            return [json.loads(line) for line in f if line.strip()]

    train = [Utterance.from_record(r, table) for r in lines("train")]
    seen = [EvalPair(Utterance.from_record(r["prompt"], table), Utterance.from_record(r["source"], table))
            for r in lines("eval_seen")]
    unseen = [EvalPair(Utterance.from_record(r["prompt"], table), Utterance.from_record(r["source"], table))
              for r in lines("eval_unseen")]
    return Dataset(task, table, train, seen, unseen, int(meta["prompt_frames"]))
