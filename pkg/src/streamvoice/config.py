"""Configuration dataclasses, validation and (de)serialization.

Run configs are JSON documents with a ``schema_version`` field. Every
nested section is a dataclass; unknown keys are rejected with the dotted
path of the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "STREAMVOICE_OUTPUT_DIR"


def _check(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


@dataclass
class TaskConfig:
    semantic_vocab: int = 32
    codec_layers: int = 4
    codebook_size: int = 16
    semantic_dim: int = 32
    speakers: int = 8
    unseen_speakers: int = 2
    frame_ratio: int = 2
    p_sub: float = 0.1
    min_len: int = 40
    max_len: int = 120
    silence_edge_max: int = 2
    codec_primes: list[int] = field(default_factory=lambda: [3, 5, 7, 11])
    continuous_dim: int = 16
    n_train: int = 1000
    n_eval: int = 32
    eval_min_len: int = 30
    eval_max_len: int = 40
    seed: int = 0

    def validate(self, path: str = "task"):
        _check(self.codec_layers >= 1, f"{path}.codec_layers", "must be >= 1")
        _check(self.codebook_size >= 2, f"{path}.codebook_size", "must be >= 2")
        _check(self.semantic_vocab >= 1, f"{path}.semantic_vocab", "must be >= 1")
        _check(self.semantic_dim >= 1, f"{path}.semantic_dim", "must be >= 1")
        _check(self.speakers >= 1, f"{path}.speakers", "must be >= 1")
        _check(
            0 <= self.unseen_speakers < self.speakers,
            f"{path}.unseen_speakers",
            "must leave at least one training speaker",
        )
        _check(
            isinstance(self.frame_ratio, int) and self.frame_ratio >= 1,
            f"{path}.frame_ratio",
            "must be an integer >= 1",
        )
        _check(0.0 <= self.p_sub < 1.0, f"{path}.p_sub", "must satisfy 0 <= p_sub < 1")
        _check(1 <= self.min_len <= self.max_len, f"{path}.min_len", "need 1 <= min_len <= max_len")
        _check(
            1 <= self.eval_min_len <= self.eval_max_len,
            f"{path}.eval_min_len",
            "need 1 <= eval_min_len <= eval_max_len",
        )
        _check(self.silence_edge_max >= 0, f"{path}.silence_edge_max", "must be >= 0")
        _check(
            len(self.codec_primes) == self.codec_layers,
            f"{path}.codec_primes",
            f"need one prime per codec layer ({self.codec_layers})",
        )
        _check(self.continuous_dim >= 1, f"{path}.continuous_dim", "must be >= 1")
        _check(self.n_train >= 1 and self.n_eval >= 1, f"{path}.n_train", "dataset sizes must be >= 1")

    @property
    def silence_token(self) -> int:
        return self.semantic_vocab

    @property
    def train_speakers(self) -> list[int]:
        return list(range(self.speakers - self.unseen_speakers))

    @property
    def unseen_speaker_ids(self) -> list[int]:
        return list(range(self.speakers - self.unseen_speakers, self.speakers))


@dataclass
class LmConfig:
    layers: int = 4
    heads: int = 8
    hidden: int = 128
    intermediate: int = 512
    acoustic_embed_dim: int = 32
    max_positions: int = 512
    mask_ratio: list[float] = field(default_factory=lambda: [0.01, 0.02])
    mask_span: int = 10
    foresight_k: int = 4
    bottleneck_divisor: int = 6
    use_bottleneck: bool = True
    lookahead: int = 0

    def validate(self, path: str = "lm"):
        _check(self.layers >= 1, f"{path}.layers", "must be >= 1")
        _check(self.heads >= 1, f"{path}.heads", "must be >= 1")
        _check(self.hidden % self.heads == 0, f"{path}.hidden", "must be divisible by heads")
        _check((self.hidden // self.heads) % 2 == 0, f"{path}.hidden", "head dim must be even for rotary")
        _check(self.intermediate >= 1, f"{path}.intermediate", "must be >= 1")
        _check(self.acoustic_embed_dim >= 1, f"{path}.acoustic_embed_dim", "must be >= 1")
        _check(self.max_positions >= 2, f"{path}.max_positions", "must be >= 2")
        _check(
            len(self.mask_ratio) == 2 and 0.0 <= self.mask_ratio[0] <= self.mask_ratio[1] <= 1.0,
            f"{path}.mask_ratio",
            "need [lo, hi] with 0 <= lo <= hi <= 1",
        )
        _check(self.mask_span >= 1, f"{path}.mask_span", "must be >= 1")
        _check(self.foresight_k >= 0, f"{path}.foresight_k", "must be >= 0")
        _check(self.bottleneck_divisor >= 1, f"{path}.bottleneck_divisor", "must be >= 1")
        _check(self.lookahead >= 0, f"{path}.lookahead", "must be >= 0")


@dataclass
class PredictorConfig:
    mode: str = "discrete"
    layers: int = 1
    hidden: int = 64
    feedforward: int = 256
    heads: int = 4
    continuous_depth: int = 3

    def validate(self, path: str = "predictor"):
        _check(self.mode in ("discrete", "continuous"), f"{path}.mode", "must be 'discrete' or 'continuous'")
        _check(self.layers >= 1, f"{path}.layers", "must be >= 1")
        _check(self.heads >= 1 and self.hidden % self.heads == 0, f"{path}.hidden", "must be divisible by heads")
        _check(self.feedforward >= 1, f"{path}.feedforward", "must be >= 1")
        _check(self.continuous_depth >= 1, f"{path}.continuous_depth", "must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    lr_decay: float = 0.986
    batch_size: int = 4
    max_steps: int = 2000
    max_frames: int = 240
    grad_clip: float = 1.0
    tf_weight: float = 1.0
    tf_current: bool = True
    tf_future: bool = True
    use_masking: bool = True
    dtype: str = "float32"
    log_every: int = 50
    seed: int = 0

    def validate(self, path: str = "train"):
        _check(self.lr >= 0.0, f"{path}.lr", "must be >= 0")
        _check(0.0 < self.lr_decay <= 1.0, f"{path}.lr_decay", "must be in (0, 1]")
        _check(0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0, f"{path}.beta1", "betas must be in [0, 1)")
        _check(self.weight_decay >= 0.0, f"{path}.weight_decay", "must be >= 0")
        _check(self.batch_size >= 1, f"{path}.batch_size", "must be >= 1")
        _check(self.max_steps >= 0, f"{path}.max_steps", "must be >= 0")
        _check(self.max_frames >= 1, f"{path}.max_frames", "must be >= 1")
        _check(self.grad_clip > 0.0, f"{path}.grad_clip", "must be > 0")
        _check(self.dtype in ("float32", "float64"), f"{path}.dtype", "must be float32 or float64")
        _check(self.log_every >= 1, f"{path}.log_every", "must be >= 1")


@dataclass
class StreamConfig:
    silence_frames: int = 10
    prompt_frames: int = 150
    frame_ms: float = 20.0
    chunk_ms: float = 80.0
    bench_frames: int = 100
    bench_repetitions: int = 5
    bench_warmup: int = 1

    def validate(self, path: str = "stream"):
        _check(self.silence_frames >= 0, f"{path}.silence_frames", "must be >= 0")
        _check(self.prompt_frames >= 0, f"{path}.prompt_frames", "must be >= 0")
        _check(self.frame_ms > 0 and self.chunk_ms > 0, f"{path}.frame_ms", "durations must be > 0")
        _check(self.bench_frames >= 1, f"{path}.bench_frames", "must be >= 1")
        _check(self.bench_repetitions >= 1, f"{path}.bench_repetitions", "must be >= 1")
        _check(self.bench_warmup >= 0, f"{path}.bench_warmup", "must be >= 0")


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    task: TaskConfig = field(default_factory=TaskConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)

    def validate(self):
        _check(
            self.schema_version == SCHEMA_VERSION,
            "schema_version",
            f"unsupported version {self.schema_version}, expected {SCHEMA_VERSION}",
        )
        self.task.validate()
        self.lm.validate()
        self.predictor.validate()
        self.train.validate()
        self.stream.validate()
        if self.lm.use_bottleneck:
            _check(
                self.task.semantic_dim >= self.lm.bottleneck_divisor,
                "lm.bottleneck_divisor",
                f"semantic_dim {self.task.semantic_dim} < divisor {self.lm.bottleneck_divisor}",
            )
        _check(
            2 * self.train.max_frames <= self.lm.max_positions,
            "train.max_frames",
            f"2 * max_frames exceeds lm.max_positions ({self.lm.max_positions})",
        )
        _check(
            self.task.max_len * self.task.frame_ratio <= self.train.max_frames,
            "task.max_len",
            "longest training utterance exceeds train.max_frames",
        )
        return self

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        data = dict(data)
        seed = data.get("seed", 0)
        # section seeds follow the top-level seed unless set explicitly
        for sec in ("task", "train"):
            sub = data.setdefault(sec, {})
            if isinstance(sub, dict):
                sub.setdefault("seed", seed)
        cfg = _build(cls, data, "")
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(value, default, sub)
    return cls(**kwargs)


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.field=value`` scalar overrides (value parsed as JSON)."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"{key}: unknown key")
            node = node[p]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            raise ConfigError(f"{key}: unknown key")
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


def tiny_config(seed: int = 0) -> RunConfig:
    """Small model/task used by gradient checks and fast tests."""
    return RunConfig.from_dict(
        {
            "seed": seed,
            "output_dir": "runs/tiny",
            "task": {
                "semantic_vocab": 8,
                "codec_layers": 2,
                "codebook_size": 5,
                "semantic_dim": 12,
                "speakers": 3,
                "unseen_speakers": 1,
                "codec_primes": [3, 7],
                "min_len": 3,
                "max_len": 6,
                "eval_min_len": 2,
                "eval_max_len": 3,
                "continuous_dim": 4,
                "n_train": 8,
                "n_eval": 4,
            },
            "lm": {
                "layers": 2,
                "heads": 2,
                "hidden": 16,
                "intermediate": 24,
                "acoustic_embed_dim": 4,
                "max_positions": 64,
                "mask_span": 3,
                "foresight_k": 2,
            },
            "predictor": {"hidden": 8, "feedforward": 12, "heads": 2},
            "train": {"batch_size": 2, "max_steps": 20, "max_frames": 16, "dtype": "float64"},
            "stream": {"silence_frames": 2, "prompt_frames": 6, "bench_frames": 8, "bench_repetitions": 2},
        }
    )


def desk_config(seed: int = 0) -> RunConfig:
    return RunConfig.from_dict({"seed": seed, "output_dir": "runs/desk"})


def large_config(seed: int = 0) -> RunConfig:
    """Full-size architecture (L=4, V=1024, 6x1024 LM, 256-wide predictor)."""
    return RunConfig.from_dict(
        {
            "seed": seed,
            "output_dir": "runs/large",
            "task": {
                "codebook_size": 1024,
                "semantic_vocab": 512,
                "semantic_dim": 256,
                "continuous_dim": 64,
                "codec_primes": [3, 5, 7, 11],
                "max_len": 150,
            },
            "lm": {
                "layers": 6,
                "heads": 8,
                "hidden": 1024,
                "intermediate": 4096,
                "acoustic_embed_dim": 256,
                "max_positions": 1200,
            },
            "predictor": {"hidden": 256, "feedforward": 1024, "heads": 4},
            "train": {"max_frames": 600, "batch_size": 7},
        }
    )


PRESETS = {"tiny": tiny_config, "desk": desk_config, "large": large_config}
