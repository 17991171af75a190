"""Frame-by-frame streaming conversion with a key/value cache.

A session consumes aligned semantic frames one at a time. Each frame
costs two cached LM positions: the semantic frame (whose output is fed to
the acoustic predictor) and the chosen acoustic frame (output skipped).

With look-ahead m the LM's semantic input for frame t is frame t+m, so the
first m source frames only fill the buffer and ``step`` returns ``None``;
``flush`` drains the buffer at the end of the input by repeating the last
frame.
"""

from __future__ import annotations

import json
import statistics
import time
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SequenceLengthError
from .model import StreamVoice

PROMPT, SILENCE, SOURCE = "prompt", "silence", "source"


class StreamSession:
    def __init__(self, model: StreamVoice):
        self.model = model
        self.lm = model.lm
        self.lookahead = model.cfg.lm.lookahead
        self.max_positions = model.cfg.lm.max_positions
        self.cache = self.lm.new_cache()
        self.owed: deque = deque()
        self.frames_in = 0
        self.prompt_len = 0
        self.emitted = 0
        self.logits: list[np.ndarray] = []
        self.timing = {"lm": 0.0, "predictor": 0.0}
        self._last = None
        self._warned = False

    @property
    def position(self) -> int:
        return self.cache.length

    # -- core --------------------------------------------------------------

    def _feed(self, s_frame, kind, teacher=None):
        s_frame = np.asarray(s_frame, dtype=self.model.dtype)
        self.owed.append((kind, teacher))
        self.frames_in += 1
        self._last = s_frame
        if len(self.owed) > self.lookahead:
            return self._advance(s_frame)
        return None

    def _advance(self, s_sem):
        kind, teacher = self.owed.popleft()
        if self.cache.length + 2 > self.max_positions and not self._warned:
            warnings.warn(
                f"stream passed the trained length of {self.max_positions} positions; quality may degrade",
                RuntimeWarning,
                stacklevel=3,
            )
            self._warned = True
        t0 = time.perf_counter()
        out = self.lm.step_semantic(self.cache, s_sem)
        t1 = time.perf_counter()
        if kind == PROMPT:
            acoustic, logits = None, None
        else:
            acoustic, logits = self.model.decode(out.ch[None, :])
        t2 = time.perf_counter()
        chosen = acoustic[0] if teacher is None else np.asarray(teacher)
        self.lm.step_acoustic(self.cache, chosen)
        t3 = time.perf_counter()
        self.timing["lm"] += (t1 - t0) + (t3 - t2)
        self.timing["predictor"] += t2 - t1
        if kind != SOURCE:
            return None
        self.emitted += 1
        if logits is not None:
            self.logits.append(logits[0])
        return acoustic[0]

    def step(self, s_frame, teacher=None):
        """Consume one source semantic frame; return its acoustic frame or None.

        ``teacher`` (optional) is fed back into the cache instead of the
        prediction when this frame's turn comes, for teacher-forced scoring.
        """
        return self._feed(s_frame, SOURCE, teacher)

    def flush(self) -> list[np.ndarray]:
        """Emit the frames still held back by the look-ahead buffer."""
        out = []
        while self.owed:
            a = self._advance(self._last)
            if a is not None:
                out.append(a)
        return out


def init_session(model: StreamVoice, prompt_s=None, prompt_a=None, silence_frames: int = 0,
                 silence_feature=None) -> StreamSession:
    """Prefix the speaker prompt and a stretch of silence into a new session."""
    sess = StreamSession(model)
    n_prompt = 0 if prompt_s is None else len(prompt_s)
    if n_prompt:
        if prompt_a is None or len(prompt_a) != n_prompt:
            raise ValueError("prompt semantic and acoustic frames must be aligned and equal length")
        if 2 * (n_prompt + silence_frames) > model.cfg.lm.max_positions:
            raise SequenceLengthError(
                f"prompt of {n_prompt} frames + {silence_frames} silence exceeds "
                f"max_positions {model.cfg.lm.max_positions}"
            )
        m = sess.lookahead
        bulk = n_prompt - m
        if bulk > 0:
            # slots whose semantic input (frame t+m) is already inside the prompt
            sess.lm.prefill(sess.cache, prompt_s[m:], prompt_a[:bulk])
        for i in range(max(bulk, 0), n_prompt):
            sess.owed.append((PROMPT, prompt_a[i]))
        sess.frames_in = n_prompt
        sess._last = np.asarray(prompt_s[-1], dtype=model.dtype)
    if silence_frames:
        if silence_feature is None:
            raise ValueError("silence_frames > 0 needs a silence feature vector")
        for _ in range(silence_frames):
            sess._feed(silence_feature, SILENCE)
    sess.prompt_len = n_prompt
    return sess


def offline_greedy(model: StreamVoice, source_s, prompt_s=None, prompt_a=None, silence_frames: int = 0,
                   silence_feature=None):
    """Reference decode without a cache: the whole sequence is recomputed
    for every generated frame. Returns (source acoustics, source logits)."""
    parts = []
    if prompt_s is not None and len(prompt_s):
        parts.append(np.asarray(prompt_s))
    if silence_frames:
        parts.append(np.repeat(np.asarray(silence_feature)[None, :], silence_frames, axis=0))
    parts.append(np.asarray(source_s))
    s_all = np.concatenate(parts).astype(model.dtype)
    n = len(s_all)
    n_prompt = 0 if prompt_s is None else len(prompt_s)
    if model.discrete:
        acoustic = np.zeros((n, model.cfg.task.codec_layers), dtype=np.int64)
    else:
        acoustic = np.zeros((n, model.cfg.task.continuous_dim), dtype=model.dtype)
    if n_prompt:
        acoustic[:n_prompt] = prompt_a
    outs, logits = [], []
    for t in range(n_prompt, n):
        ch = model.context_states(s_all, acoustic).ch[t]
        a, lg = model.decode(ch[None, :])
        acoustic[t] = a[0]
        if t >= n_prompt + silence_frames:
            outs.append(a[0])
            if lg is not None:
                logits.append(lg[0])
    return np.array(outs), (np.array(logits) if logits else None)


def stream_all(sess: StreamSession, source_s, teacher=None):
    """Feed every source frame, flush, and return the emitted frames."""
    out = []
    for i, s in enumerate(source_s):
        a = sess.step(s, None if teacher is None else teacher[i])
        if a is not None:
            out.append(a)
    out.extend(sess.flush())
    return np.array(out)


# ---------------------------------------------------------------------------
# latency accounting
# ---------------------------------------------------------------------------


@dataclass
class LatencyReport:
    model_rtf: float
    chunk_ms: float
    chunk_wait_ms: float
    model_latency_ms: float
    total_latency_ms: float
    component_rtf: dict = field(default_factory=dict)
    frame_ms: float = 20.0
    frames: int = 0
    repetitions: int = 0

    @classmethod
    def from_rtf(cls, rtf: float, chunk_ms: float, component_rtf=None, **kw) -> "LatencyReport":
        model_latency = rtf * chunk_ms
        return cls(
            model_rtf=rtf,
            chunk_ms=chunk_ms,
            chunk_wait_ms=chunk_ms,
            model_latency_ms=model_latency,
            total_latency_ms=model_latency + chunk_ms,
            component_rtf=dict(component_rtf or {}),
            **kw,
        )

    @classmethod
    def from_components(cls, component_rtf: dict, chunk_ms: float, **kw) -> "LatencyReport":
        return cls.from_rtf(sum(component_rtf.values()), chunk_ms, component_rtf, **kw)

    def component_latency_ms(self) -> dict:
        return {k: v * self.chunk_ms for k, v in self.component_rtf.items()}

    def consistent(self, tol_ms: float = 0.1) -> bool:
        vals = (self.model_rtf, self.chunk_ms, self.model_latency_ms, self.total_latency_ms)
        return (
            all(v >= 0 for v in vals)
            and abs(self.total_latency_ms - (self.model_rtf * self.chunk_ms + self.chunk_ms)) <= tol_ms
            and abs(self.total_latency_ms - (self.model_latency_ms + self.chunk_wait_ms)) <= tol_ms
        )

    def as_record(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        rows = [f"{'component':<16}{'RTF':>10}{'latency ms':>14}"]
        for k, v in self.component_rtf.items():
            rows.append(f"{k:<16}{v:>10.4f}{v * self.chunk_ms:>14.1f}")
        rows.append(
            f"{'overall':<16}{self.model_rtf:>10.4f}"
            f"{f'{self.model_latency_ms:.1f}+{self.chunk_wait_ms:.0f}={self.total_latency_ms:.1f}':>14}"
        )
        return "\n".join(rows)


def bench(model: StreamVoice, frames: int, chunk_ms: float = 80.0, repetitions: int = 5, warmup: int = 1,
          frame_ms: float = 20.0, prompt=None, silence_frames: int = 0, silence_feature=None,
          rng: np.random.Generator | None = None) -> LatencyReport:
    """Median real-time factor of streaming ``frames`` frames.

    Session setup (prompt + silence) and input generation are outside the
    timed region; the first ``warmup`` repetitions are discarded.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = model.cfg.task.semantic_dim
    rtfs, comps = [], {"lm": [], "predictor": []}
    for rep in range(warmup + repetitions):
        src = rng.standard_normal((frames, d)).astype(model.dtype)
        p_s, p_a = (None, None) if prompt is None else prompt
        sess = init_session(model, p_s, p_a, silence_frames, silence_feature)
        sess.timing = {"lm": 0.0, "predictor": 0.0}
        t0 = time.perf_counter()
        for s in src:
            sess.step(s)
        sess.flush()
        elapsed = time.perf_counter() - t0
        if rep < warmup:
            continue
        per_frame_ms = 1000.0 * elapsed / frames
        rtfs.append(per_frame_ms / frame_ms)
        for k in comps:
            comps[k].append(1000.0 * sess.timing[k] / frames / frame_ms)
    component = {k: statistics.median(v) for k, v in comps.items()}
    return LatencyReport.from_rtf(
        statistics.median(rtfs), chunk_ms, component, frame_ms=frame_ms, frames=frames, repetitions=repetitions
    )


# ---------------------------------------------------------------------------
# record-stream I/O
# ---------------------------------------------------------------------------


def stream_records(sess: StreamSession, lines, out, table=None):
    """Convert an input record stream frame by frame.

    Input lines are JSON objects ``{"features": [...]}`` (one aligned
    semantic frame) or ``{"token": k}`` (looked up in ``table``). Each
    emitted frame is written as ``{"t": i, "codes": [...]}`` (or
    ``"latent"`` in continuous mode) and flushed immediately.
    """
    key = "codes" if sess.model.discrete else "latent"
    t = 0

    def emit(a):
        nonlocal t
        out.write(json.dumps({"t": t, key: np.asarray(a).tolist()}) + "\n")
        out.flush()
        t += 1

    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if "features" in rec:
            s = np.asarray(rec["features"], dtype=np.float64)
        elif "token" in rec:
            if table is None:
                raise ValueError("token records need a feature table")
            s = table[int(rec["token"])]
        else:
            raise ValueError(f"record without 'features' or 'token': {line[:80]}")
        a = sess.step(s)
        if a is not None:
            emit(a)
    for a in sess.flush():
        emit(a)
    return t
