"""Multi-turn interaction loop over a pluggable model backend.

One session run is a serial state machine: a global-analysis turn, then one
turn per observation window proposed by the backend, then (optionally) a
consolidation turn that returns the ``<answer>`` transcript. Long-form audio
is chunked and each chunk is run with a speaker-aware cache built from the
chunks before it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

from sklearn.base import BaseEstimator

from .audio import AudioBuffer, segment_long_form, slice_audio
from .backends import request_gate
from .boundary import BoundaryDecision
from .cache import CacheEntry, ObservationBuffer, select_cache
from .config import GlobalConfig
from .errors import BackendError, ProtocolViolation, UnparseableTurn
from .protocol import (
    TASK_ANSWER,
    TASK_GLOBAL,
    TASK_OBSERVE,
    TurnOutput,
    Window,
    build_prompt,
    parse_turn_output,
    relabel_cache,
)
from .timeline import Segment, TimeInterval, sort_segments
from .validation import quantize_time

__all__ = [
    "InteractionTurn",
    "SessionResult",
    "LongFormResult",
    "ChunkFailure",
    "run_session",
    "run_long_form",
    "consolidate",
    "turn_log_records",
    "TemporalTranscriber",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InteractionTurn:
    index: int
    task: str
    observation: TimeInterval | None
    payload: dict
    raw: str
    parsed: TurnOutput | None
    flags: tuple[str, ...] = ()


@dataclass
class SessionResult:
    """Outcome of one window: the transcript plus the full turn log.

    ``summary`` is the parsed global-analysis turn when it parsed as one.
    """

    transcript: list[Segment]
    turns: list[InteractionTurn]
    summary: TurnOutput | None = None
    flags: list[str] = field(default_factory=list)

    def __iter__(self):
        yield self.transcript
        yield self.turns


@dataclass(frozen=True)
class ChunkFailure:
    chunk: TimeInterval
    error: str


@dataclass
class LongFormResult:
    transcript: list[Segment]
    chunks: list[TimeInterval]
    results: list[SessionResult | None]
    failures: list[ChunkFailure] = field(default_factory=list)

    @property
    def summaries(self) -> list[TurnOutput]:
        return [r.summary for r in self.results if r is not None and r.summary is not None]


def consolidate(turns: Sequence[InteractionTurn]) -> list[Segment]:
    """Chronological union of all segment-turn output.

    Re-emitted segments (same speaker, interval and text) collapse to their
    first occurrence.
    """
    seen = set()
    out = []
    for t in turns:
        if t.parsed is None or t.parsed.kind != "segment_turn":
            continue
        for s in t.parsed.segments:
            key = (s.speaker, s.start, s.end, s.text)
            if key not in seen:
                seen.add(key)
                out.append(s)
    return sort_segments(out)


def _locality_flags(segments, iv: TimeInterval, slack: float) -> list[str]:
    return [
        f"segment [{s.start:.2f}-{s.end:.2f}] outside observation [{iv.start:.2f}-{iv.end:.2f}]"
        for s in segments if not iv.contains(s.interval, slack)
    ]


def run_session(audio: AudioBuffer, backend, config: GlobalConfig | None = None, *,
                cache: Sequence[CacheEntry] = (), offset: float = 0.0,
                source: AudioBuffer | None = None) -> SessionResult:
    """Run the interaction protocol over one window of audio.

    Turn 1 is global analysis over the whole window. Each following turn
    observes the interval named by the previous boundary decision (the
    whole window if turn 1 named none) until the backend terminates or
    answers; an answer on turn 1 does not end the protocol. With
    ``config.answer_turn`` a terminated run gets one consolidation turn
    whose ``<answer>`` becomes the transcript.

    Args:
        audio: The window. Its ``ref`` names the file the window came from.
        cache: Entries with absolute times in ``source`` (defaults to
            ``audio``); prompted renumbered 1..m.
        offset: Where the window starts inside ``source``.

    Raises:
        BackendError: ``generate`` raised; carries the turn index.
        ProtocolViolation: an unparseable response, or a boundary that does
            not move strictly forward or leaves the window. Carries the
            partial transcript and turn log.
    """
    cfg = config or GlobalConfig()
    T = audio.duration
    if T > cfg.window + 1e-6:
        raise ValueError(f"audio is {T:.2f}s, longer than the {cfg.window}s window; use run_long_form")
    window = Window(audio.ref, quantize_time(offset), T)
    embed = bool(getattr(backend, "supports_audio_bytes", False))
    src = source if source is not None else audio
    turns: list[InteractionTurn] = []
    flags: list[str] = []
    gate = request_gate(backend)

    def call(task: str, iv: TimeInterval | None) -> InteractionTurn:
        index = len(turns) + 1
        payload = build_prompt(iv, turns, cache, task=task, window=window, turn=index,
                               audio=audio, source=src, embed_audio=embed)
        try:
            with gate:
                raw = backend.generate(payload)
        except Exception as exc:
            raise BackendError(str(exc), index) from exc
        try:
            parsed = parse_turn_output(raw)
        except UnparseableTurn as exc:
            turn = InteractionTurn(index, task, iv, payload, raw, None, ("unparseable",))
            turns.append(turn)
            raise ProtocolViolation(f"turn {index}: {exc}", consolidate(turns), turns) from exc
        tflags = [f"repair: {r}" for r in parsed.repairs]
        if iv is not None and parsed.kind == "segment_turn":
            tflags += _locality_flags(parsed.segments, iv, cfg.slack)
        turn = InteractionTurn(index, task, iv, payload, raw, parsed, tuple(tflags))
        turns.append(turn)
        flags.extend(f"turn {index}: {f}" for f in tflags)
        return turn

    first = call(TASK_GLOBAL, TimeInterval(0.0, T) if T > 0 else None)
    summary = first.parsed if first.parsed.kind == "global_summary" else None
    if first.parsed.kind == "final_answer":
        flags.append("turn 1: answer on the global turn ignored")
    decision = first.parsed.decision
    if decision is None and T > 0:
        decision = BoundaryDecision.continue_with(TimeInterval(0.0, T))

    answer: TurnOutput | None = None
    prev_start: float | None = None
    while decision is not None and not decision.is_terminal:
        if len(turns) >= cfg.max_turns:
            flags.append(f"stopped at max_turns={cfg.max_turns}")
            break
        iv = decision.next_interval
        if prev_start is not None and iv.start <= prev_start:
            raise ProtocolViolation(
                f"turn {len(turns)}: next observation starts at {iv.start:.2f}, "
                f"not after {prev_start:.2f}", consolidate(turns), turns)
        if iv.start >= T:
            raise ProtocolViolation(
                f"turn {len(turns)}: next observation [{iv.start:.2f}-{iv.end:.2f}] "
                f"lies outside the {T:.2f}s window", consolidate(turns), turns)
        if iv.end > T:
            iv = TimeInterval(iv.start, T)
        turn = call(TASK_OBSERVE, iv)
        if turn.parsed.kind == "final_answer":
            answer = turn.parsed
            break
        if turn.parsed.kind == "global_summary":
            flags.append(f"turn {turn.index}: summary in an observation turn")
        decision = turn.parsed.decision
        if decision is None:
            decision = BoundaryDecision.terminate()
        prev_start = iv.start

    if answer is None and cfg.answer_turn and len(turns) < cfg.max_turns:
        turn = call(TASK_ANSWER, None)
        if turn.parsed.kind == "final_answer":
            answer = turn.parsed
        else:
            flags.append(f"turn {turn.index}: no <answer> in the consolidation turn")
    transcript = sort_segments(answer.segments) if answer is not None else consolidate(turns)
    return SessionResult(transcript, turns, summary, flags)


def _shift(seg: Segment, offset: float, speaker: int) -> Segment:
    iv = TimeInterval(quantize_time(seg.start + offset), quantize_time(seg.end + offset))
    return Segment(speaker, seg.gender, iv, seg.text)


def run_long_form(audio: AudioBuffer, backend, config: GlobalConfig | None = None, *,
                  vad=None) -> LongFormResult:
    """Chunk ``audio`` and run each chunk with a cache from earlier chunks.

    Before each chunk the cache is re-selected from every observation
    decoded so far, for every speaker seen so far, keeping only spans that
    end before the chunk. In the chunk's prompts cache speakers are
    numbered 1..m; the backend's labels 1..m therefore map back to those
    global speakers and labels above m are new speakers, numbered after
    the largest global label in use. Without a cache every chunk's
    speakers are new.

    A chunk that raises ``BackendError`` or ``ProtocolViolation`` is
    recorded in ``failures`` and skipped, unless ``config.strict``.
    """
    cfg = config or GlobalConfig()
    chunks = segment_long_form(audio, vad, cfg.min_window, cfg.window)
    buffer = ObservationBuffer(audio.ref)
    seen: set[tuple] = set()
    top = 0
    transcript: list[Segment] = []
    results: list[SessionResult | None] = []
    failures: list[ChunkFailure] = []
    for chunk in chunks:
        cache: list[CacheEntry] = []
        if cfg.use_cache and len(buffer):
            selected = select_cache(buffer, buffer.speakers(), cfg.alpha, cfg.k, before=chunk.start)
            cache = [e for v in selected.values() for e in v]
        _, order = relabel_cache(cache)
        m = len(order)
        window = slice_audio(audio, chunk).as_buffer()
        try:
            res = run_session(window, backend, cfg, cache=cache, offset=chunk.start, source=audio)
        except (BackendError, ProtocolViolation) as exc:
            if cfg.strict:
                raise
            log.warning("chunk [%.2f-%.2f] failed: %s", chunk.start, chunk.end, exc)
            failures.append(ChunkFailure(chunk, str(exc)))
            results.append(None)
            continue
        results.append(res)

        def to_global(local: int, base: int = top) -> int:
            return order[local - 1] if local <= m else base + (local - m)

        decoded = [s for t in res.turns if t.parsed is not None for s in t.parsed.segments]
        labels = [s.speaker for s in decoded + res.transcript]
        top = max([top] + [to_global(x) for x in labels])
        for seg in res.transcript:
            transcript.append(_shift(seg, chunk.start, to_global(seg.speaker)))
        for t in res.turns:
            if t.parsed is None or t.parsed.kind != "segment_turn" or t.observation is None:
                continue
            fresh = []
            for s in t.parsed.segments:
                g = _shift(s, chunk.start, to_global(s.speaker))
                key = (g.speaker, g.start, g.end, g.text)
                if key not in seen:
                    seen.add(key)
                    fresh.append(g)
            obs_iv = TimeInterval(quantize_time(t.observation.start + chunk.start),
                                  quantize_time(t.observation.end + chunk.start))
            buffer.append(obs_iv, fresh)
    return LongFormResult(sort_segments(transcript), chunks, results, failures)


def turn_log_records(turns: Sequence[InteractionTurn], session_id: str | None = None,
                     chunk: int | None = None) -> list[dict]:
    """JSON-ready audit rows, one per turn. Embedded audio is elided."""
    rows = []
    for t in turns:
        payload = json.loads(json.dumps(t.payload))
        for rec in payload.get("cache", []):
            if "audio_b64" in rec:
                rec["audio_b64"] = f"<{len(rec['audio_b64'])} chars>"
        obs = payload.get("observation") or {}
        if "audio_b64" in obs:
            obs["audio_b64"] = f"<{len(obs['audio_b64'])} chars>"
        row = {}
        if session_id is not None:
            row["session_id"] = session_id
        if chunk is not None:
            row["chunk"] = chunk
        row.update(turn=t.index, task=t.task,
                   kind=None if t.parsed is None else t.parsed.kind,
                   prompt=payload, response=t.raw, flags=list(t.flags))
        rows.append(row)
    return rows


class TemporalTranscriber(BaseEstimator):
    """Estimator front end for the interaction loop.

    ``fit`` only validates parameters; the backend carries all learned
    state. ``predict`` maps audio to a transcript, chunking with the
    speaker cache when ``long_form`` is set or the audio exceeds
    ``window``.
    """

    def __init__(self, backend=None, tau=0.8, alpha=0.5, k=3, window=50.0, min_window=40.0,
                 max_turns=64, slack=0.5, use_cache=True, answer_turn=True, long_form=False,
                 strict=False):
        self.backend = backend
        self.tau = tau
        self.alpha = alpha
        self.k = k
        self.window = window
        self.min_window = min_window
        self.max_turns = max_turns
        self.slack = slack
        self.use_cache = use_cache
        self.answer_turn = answer_turn
        self.long_form = long_form
        self.strict = strict

    def _config(self) -> GlobalConfig:
        return GlobalConfig(tau=self.tau, alpha=self.alpha, k=self.k, window=self.window,
                            min_window=self.min_window, max_turns=self.max_turns,
                            slack=self.slack, use_cache=self.use_cache,
                            answer_turn=self.answer_turn, strict=self.strict)

    def fit(self, X=None, y=None):
        if self.backend is None:
            raise ValueError("TemporalTranscriber needs a backend")
        self.config_ = self._config()
        return self

    def predict_result(self, audio: AudioBuffer, vad=None):
        cfg = getattr(self, "config_", None) or self.fit().config_
        if self.long_form or audio.duration > cfg.window:
            return run_long_form(audio, self.backend, cfg, vad=vad)
        return run_session(audio, self.backend, cfg)

    def predict(self, audio: AudioBuffer, vad=None) -> list[Segment]:
        return self.predict_result(audio, vad).transcript
