"""Turn-output grammar and prompt payloads shared by every backend.

Grammar, version 1. A response is one of:

* final answer -- ``<answer>`` ... ``</answer>`` enclosing segment lines;
* global summary -- ``speakers: N; genders: male=2, female=1`` optionally
  followed by a boundary line;
* segment turn -- zero or more segment lines
  ``[12.30-14.05] spk2 (female): text`` and one boundary line,
  ``next: [14.00-19.50]`` or ``next: terminate``.

Times are seconds with two decimals, relative to the audio window the
prompt was built for. Unrecognised lines are skipped and listed in
``TurnOutput.repairs``.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .audio import AudioBuffer, slice_audio, wav_bytes
from .boundary import BoundaryDecision
from .cache import CacheEntry, cache_speaker_order, flatten_cache
from .errors import UnparseableTurn
from .timeline import Gender, Segment, TimeInterval
from .validation import quantize_time

__all__ = [
    "GRAMMAR_VERSION",
    "TASK_GLOBAL",
    "TASK_OBSERVE",
    "TASK_ANSWER",
    "INSTRUCTIONS",
    "TurnOutput",
    "Window",
    "parse_turn_output",
    "serialize_turn_output",
    "format_segment",
    "format_summary",
    "format_decision",
    "build_prompt",
    "prompt_bytes",
    "relabel_cache",
]

GRAMMAR_VERSION = "1"

TASK_GLOBAL = "global"
TASK_OBSERVE = "observe"
TASK_ANSWER = "answer"

INSTRUCTIONS = {
    TASK_GLOBAL: (
        "Listen to the whole recording. Reply with 'speakers: N; genders: male=a, female=b' "
        "and the first observation window as 'next: [start-end]', or 'next: terminate' "
        "if there is no speech."
    ),
    TASK_OBSERVE: (
        "Transcribe the observation window. Reply with one line per utterance, "
        "'[start-end] spkK (gender): text', then 'next: [start-end]' for the next window "
        "or 'next: terminate'. Speakers already in the cache keep their cache labels."
    ),
    TASK_ANSWER: (
        "Return the consolidated, chronologically sorted transcript as segment lines "
        "enclosed in <answer> and </answer>."
    ),
}

_NUM = r"(\d+(?:\.\d+)?)"
_SEGMENT_RE = re.compile(
    r"^\[\s*" + _NUM + r"\s*-\s*" + _NUM + r"\s*\]\s*spk(\d+)\s*\((male|female|unknown)\):(?: (.*))?$"
)
_SUMMARY_RE = re.compile(r"^speakers:\s*(\d+)\s*(?:;\s*genders:\s*(.*))?$", re.IGNORECASE)
_NEXT_RE = re.compile(r"^next:\s*(?:terminate|\[\s*" + _NUM + r"\s*-\s*" + _NUM + r"\s*\])\s*$",
                      re.IGNORECASE)
_GENDER_PAIR_RE = re.compile(r"^(male|female|unknown)\s*=\s*(\d+)$", re.IGNORECASE)
_ANSWER_RE = re.compile(r"<answer>(.*?)(</answer>|$)", re.DOTALL)

_GENDER_ORDER = (Gender.MALE, Gender.FEMALE, Gender.UNKNOWN)


@dataclass(frozen=True)
class TurnOutput:
    """Parsed response of one turn.

    ``kind`` is ``"global_summary"``, ``"segment_turn"`` or
    ``"final_answer"``. ``gender_counts`` omits zero counts.
    """

    kind: str
    segments: tuple[Segment, ...] = ()
    decision: BoundaryDecision | None = None
    speaker_count: int | None = None
    gender_counts: Mapping[Gender, int] = field(default_factory=dict)
    repairs: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def global_summary(cls, speaker_count: int, gender_counts: Mapping, decision=None):
        counts = {Gender.parse(g): int(n) for g, n in gender_counts.items() if int(n)}
        return cls("global_summary", (), decision, int(speaker_count), counts)

    @classmethod
    def segment_turn(cls, segments: Sequence[Segment], decision: BoundaryDecision):
        return cls("segment_turn", tuple(segments), decision)

    @classmethod
    def final_answer(cls, transcript: Sequence[Segment]):
        return cls("final_answer", tuple(transcript))


@dataclass(frozen=True)
class Window:
    """The audio a session run sees: ``duration`` seconds of ``audio_ref``
    starting ``offset`` seconds into it."""

    audio_ref: str
    offset: float
    duration: float


def _fmt(t: float) -> str:
    return f"{quantize_time(t):.2f}"


def format_segment(seg: Segment) -> str:
    text = seg.text.replace("\r", " ").replace("\n", " ")
    return f"[{_fmt(seg.start)}-{_fmt(seg.end)}] spk{seg.speaker} ({seg.gender.value}): {text}"


def format_summary(speaker_count: int, gender_counts: Mapping) -> str:
    counts = {Gender.parse(g): int(n) for g, n in gender_counts.items()}
    parts = [f"{g.value}={counts[g]}" for g in _GENDER_ORDER if counts.get(g)]
    return f"speakers: {int(speaker_count)}; genders: {', '.join(parts)}"


def format_decision(decision: BoundaryDecision) -> str:
    if decision.is_terminal:
        return "next: terminate"
    iv = decision.next_interval
    return f"next: [{_fmt(iv.start)}-{_fmt(iv.end)}]"


def serialize_turn_output(out: TurnOutput) -> str:
    """Render ``out`` in the turn grammar; the inverse of ``parse_turn_output``."""
    if out.kind == "final_answer":
        return "<answer>\n" + "".join(format_segment(s) + "\n" for s in out.segments) + "</answer>"
    lines = []
    if out.kind == "global_summary":
        lines.append(format_summary(out.speaker_count or 0, out.gender_counts))
    elif out.kind == "segment_turn":
        lines.extend(format_segment(s) for s in out.segments)
    else:
        raise ValueError(f"unknown turn kind {out.kind!r}")
    if out.decision is not None:
        lines.append(format_decision(out.decision))
    return "\n".join(lines)


def _parse_segment(line: str) -> Segment | None:
    m = _SEGMENT_RE.match(line)
    if not m:
        return None
    a, b = quantize_time(float(m.group(1))), quantize_time(float(m.group(2)))
    if not b > a or int(m.group(3)) < 1:
        return None
    return Segment(int(m.group(3)), Gender(m.group(4)), TimeInterval(a, b), m.group(5) or "")


def _parse_segment_lines(lines, repairs: list[str]) -> list[Segment]:
    out = []
    for line in lines:
        body = line.strip("\r").lstrip()
        if not body.strip():
            continue
        seg = _parse_segment(body)
        if seg is None:
            repairs.append(f"unparsed line: {body!r}")
        else:
            out.append(seg)
    return out


def parse_turn_output(raw: str) -> TurnOutput:
    """Parse one model response, skipping and recording malformed lines.

    Raises:
        UnparseableTurn: nothing in ``raw`` matches the grammar.
    """
    repairs: list[str] = []
    m = _ANSWER_RE.search(raw)
    if m:
        if not m.group(2):
            repairs.append("missing </answer>")
        segs = _parse_segment_lines(m.group(1).split("\n"), repairs)
        return TurnOutput("final_answer", tuple(segs), repairs=tuple(repairs))

    summary = None
    decision = None
    segments: list[Segment] = []
    for line in raw.split("\n"):
        body = line.strip("\r").lstrip()
        stripped = body.strip()
        if not stripped:
            continue
        seg = _parse_segment(body)
        if seg is not None:
            segments.append(seg)
            continue
        m = _NEXT_RE.match(stripped)
        if m:
            if decision is not None:
                repairs.append(f"extra boundary line: {stripped!r}")
                continue
            if m.group(1) is None:
                decision = BoundaryDecision.terminate()
            else:
                a, b = quantize_time(float(m.group(1))), quantize_time(float(m.group(2)))
                if b > a:
                    decision = BoundaryDecision.continue_with(TimeInterval(a, b))
                else:
                    repairs.append(f"empty boundary interval: {stripped!r}")
            continue
        m = _SUMMARY_RE.match(stripped)
        if m and summary is None:
            counts: dict[Gender, int] = {}
            for part in filter(None, (p.strip() for p in (m.group(2) or "").split(","))):
                pm = _GENDER_PAIR_RE.match(part)
                if pm is None:
                    repairs.append(f"bad gender count: {part!r}")
                elif int(pm.group(2)):
                    g = Gender(pm.group(1).lower())
                    counts[g] = counts.get(g, 0) + int(pm.group(2))
            summary = (int(m.group(1)), counts)
            continue
        repairs.append(f"unparsed line: {stripped!r}")

    if summary is not None:
        if segments:
            repairs.append(f"{len(segments)} segment line(s) in a summary turn ignored")
        return TurnOutput("global_summary", (), decision, summary[0], summary[1], tuple(repairs))
    if segments or decision is not None:
        if decision is None:
            repairs.append("missing boundary line")
        return TurnOutput("segment_turn", tuple(segments), decision, repairs=tuple(repairs))
    raise UnparseableTurn(f"no parseable content in response: {raw[:80]!r}")


# -- prompts ---------------------------------------------------------------

def relabel_cache(entries: Sequence[CacheEntry]) -> tuple[list[CacheEntry], list[int]]:
    """Chronological cache block with speakers renumbered 1..m by first
    appearance; also returns the original labels in that order."""
    flat = flatten_cache(entries)
    order = cache_speaker_order(flat)
    local = {g: i for i, g in enumerate(order, 1)}
    return [CacheEntry(local[e.speaker], e.interval, e.transcript, e.audio_ref) for e in flat], order


def _b64_slice(audio: AudioBuffer, iv: TimeInterval) -> str:
    s = slice_audio(audio, iv)
    return base64.b64encode(wav_bytes(s.samples, s.sample_rate)).decode("ascii")


def build_prompt(observation: TimeInterval | None, history: Sequence, cache: Sequence[CacheEntry], *,
                 task: str, window: Window, turn: int, audio: AudioBuffer | None = None,
                 source: AudioBuffer | None = None, embed_audio: bool = False) -> dict:
    """Assemble one request: cache block, history, observation, instruction.

    ``observation`` is in window-local seconds (``None`` for the answer
    turn). Cache entries carry absolute times in ``source`` and are
    renumbered 1..m by first appearance. With ``embed_audio`` the
    observation and cache spans travel as base64 WAV instead of by
    reference, which needs ``audio`` (the window) and ``source``.
    """
    cache_block, _ = relabel_cache(cache)
    cache_recs = []
    for e in cache_block:
        rec = e.to_record()
        if embed_audio:
            if source is None:
                raise ValueError("embedding cache audio needs the source buffer")
            rec.pop("audio_ref")
            rec["audio_b64"] = _b64_slice(source, e.interval)
        cache_recs.append(rec)

    hist = []
    for t in history:
        hist.append({
            "turn": t.index,
            "task": t.task,
            "observation": None if t.observation is None else
            {"start": round(t.observation.start, 2), "end": round(t.observation.end, 2)},
            "response": t.raw,
        })

    obs = None
    if observation is not None:
        obs = {"start": round(observation.start, 2), "end": round(observation.end, 2),
               "offset": round(window.offset, 2), "window": round(window.duration, 6)}
        if embed_audio:
            if audio is None:
                raise ValueError("embedding observation audio needs the window buffer")
            obs["audio_b64"] = _b64_slice(audio, observation)
        else:
            obs["audio_ref"] = window.audio_ref
    return {
        "cache": cache_recs,
        "history": hist,
        "observation": obs,
        "instruction": INSTRUCTIONS[task],
        "task": task,
        "turn": turn,
        "grammar": GRAMMAR_VERSION,
    }


def prompt_bytes(payload: Mapping) -> bytes:
    """Canonical wire encoding of a payload."""
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
