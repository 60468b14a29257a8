"""Timestamped, speaker-attributed transcript types and their validation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import EmptySession, RangeError
from .validation import quantize_time

__all__ = [
    "Gender",
    "TimeInterval",
    "Segment",
    "SessionAnnotation",
    "Violation",
    "reassign_labels",
    "validate_session",
    "sort_segments",
    "read_transcript_jsonl",
    "write_transcript_jsonl",
    "write_annotation_jsonl",
    "segments_to_jsonl",
    "read_rttm",
    "write_rttm",
    "rttm_lines",
]


class Gender(str, Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value) -> "Gender":
        if isinstance(value, Gender):
            return value
        v = str(value).strip().lower()
        aliases = {"m": "male", "f": "female", "u": "unknown", "": "unknown"}
        return cls(aliases.get(v, v))


@dataclass(frozen=True, slots=True, order=True)
class TimeInterval:
    """Half-open span of seconds ``[start, end)`` with positive duration."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise RangeError(f"non-finite interval [{self.start}, {self.end}]")
        if self.start < 0:
            raise RangeError(f"interval start {self.start} is negative")
        if not self.start < self.end:
            raise RangeError(f"interval [{self.start}, {self.end}] has no duration")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def intersection(self, other: "TimeInterval") -> float:
        """Duration of the overlap with ``other``; 0 when disjoint or touching."""
        return max(0.0, min(self.end, other.end) - max(self.start, other.start))

    def union(self, other: "TimeInterval") -> "TimeInterval":
        return TimeInterval(min(self.start, other.start), max(self.end, other.end))

    def contains(self, other: "TimeInterval", slack: float = 0.0) -> bool:
        return self.start - slack <= other.start and other.end <= self.end + slack

    def shift(self, offset: float) -> "TimeInterval":
        return TimeInterval(self.start + offset, self.end + offset)

    def quantized(self) -> "TimeInterval":
        return TimeInterval(quantize_time(self.start), quantize_time(self.end))


@dataclass(frozen=True, slots=True)
class Segment:
    """One utterance: who spoke, their gender, when, and what was said."""

    speaker: int
    gender: Gender
    interval: TimeInterval
    text: str = ""

    def __post_init__(self):
        if isinstance(self.speaker, bool) or int(self.speaker) != self.speaker or self.speaker < 1:
            raise ValueError(f"speaker label must be a positive integer, got {self.speaker!r}")
        if not isinstance(self.gender, Gender):
            object.__setattr__(self, "gender", Gender.parse(self.gender))

    @classmethod
    def at(cls, speaker: int, start: float, end: float, text: str = "",
           gender: Gender | str = Gender.UNKNOWN) -> "Segment":
        return cls(speaker, Gender.parse(gender), TimeInterval(float(start), float(end)), text)

    @property
    def start(self) -> float:
        return self.interval.start

    @property
    def end(self) -> float:
        return self.interval.end

    @property
    def duration(self) -> float:
        return self.interval.duration

    def sort_key(self):
        return (self.interval.start, self.speaker, self.interval.end, self.text)

    def with_speaker(self, speaker: int) -> "Segment":
        return replace(self, speaker=speaker)

    def shift(self, offset: float) -> "Segment":
        return replace(self, interval=self.interval.shift(offset))

    def to_record(self, session_id: str | None = None) -> dict:
        rec = {} if session_id is None else {"session_id": session_id}
        rec.update(
            speaker=self.speaker,
            gender=self.gender.value,
            start=round(self.start, 2),
            end=round(self.end, 2),
            text=self.text,
        )
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "Segment":
        """Build from a JSONL record; times are quantized to 10 ms on ingest."""
        return cls(
            int(rec["speaker"]),
            Gender.parse(rec.get("gender", "unknown")),
            TimeInterval(quantize_time(float(rec["start"])), quantize_time(float(rec["end"]))),
            str(rec.get("text", "")),
        )


def sort_segments(segments: Iterable[Segment]) -> list[Segment]:
    """Start-time order; equal starts go to the lower speaker index."""
    return sorted(segments, key=Segment.sort_key)


@dataclass(frozen=True, slots=True)
class SessionAnnotation:
    session_id: str
    segments: tuple[Segment, ...]
    speaker_genders: Mapping[int, Gender] = field(default_factory=dict)
    duration: float | None = None
    audio_ref: str = ""

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.duration is None:
            end = max((s.end for s in self.segments), default=0.0)
            object.__setattr__(self, "duration", end)

    @classmethod
    def from_segments(cls, session_id: str, segments: Iterable[Segment], *,
                      duration: float | None = None, audio_ref: str = "",
                      speaker_genders: Mapping[int, Gender] | None = None) -> "SessionAnnotation":
        """Sort the segments and derive per-speaker genders when not given.

        The first non-unknown gender seen for a speaker wins; disagreements
        are left in the segments for ``validate_session`` to report.
        """
        segs = sort_segments(segments)
        if speaker_genders is None:
            genders: dict[int, Gender] = {}
            for s in segs:
                if genders.get(s.speaker, Gender.UNKNOWN) is Gender.UNKNOWN:
                    genders[s.speaker] = s.gender
            speaker_genders = genders
        return cls(session_id, tuple(segs), dict(speaker_genders), duration, audio_ref)

    @property
    def speakers(self) -> list[int]:
        return sorted({s.speaker for s in self.segments})

    def window(self, iv: TimeInterval) -> list[Segment]:
        """Segments whose start lies in ``[iv.start, iv.end)``."""
        return [s for s in self.segments if iv.start <= s.start < iv.end]


def reassign_labels(segments: Sequence[Segment]) -> tuple[list[Segment], dict[int, int]]:
    """Renumber speakers 1, 2, 3, ... by order of first appearance.

    First appearance is judged in start-time order with ties going to the
    lower original label; the output keeps the input order.

    Returns:
        The relabeled segments and the ``old -> new`` label table.

    Raises:
        EmptySession: ``segments`` is empty.
    """
    if not segments:
        raise EmptySession("cannot relabel an empty segment list")
    remap: dict[int, int] = {}
    for seg in sorted(segments, key=lambda s: (s.start, s.speaker)):
        if seg.speaker not in remap:
            remap[seg.speaker] = len(remap) + 1
    return [s.with_speaker(remap[s.speaker]) for s in segments], remap


@dataclass(frozen=True, slots=True)
class Violation:
    kind: str
    message: str
    segment_index: int | None = None


def validate_session(ann: SessionAnnotation) -> list[Violation]:
    """Collect annotation problems; an empty list means the session is valid.

    Checked: interval inside ``[0, duration]``, per-speaker self-overlap,
    missing or conflicting speaker gender, and canonical ordering.
    """
    out: list[Violation] = []
    T = ann.duration
    for i, s in enumerate(ann.segments):
        if s.end > T + 1e-9:
            out.append(Violation("out_of_range", f"segment {i} ends at {s.end} > duration {T}", i))
        g = ann.speaker_genders.get(s.speaker)
        if g is None:
            out.append(Violation("missing_gender", f"speaker {s.speaker} has no gender entry", i))
        elif s.gender is not Gender.UNKNOWN and g is not Gender.UNKNOWN and s.gender is not g:
            out.append(Violation(
                "gender_conflict",
                f"segment {i} says {s.gender.value}, speaker {s.speaker} is {g.value}", i))

    keys = [(s.start, s.speaker) for s in ann.segments]
    for i in range(1, len(keys)):
        if keys[i] < keys[i - 1]:
            out.append(Violation("unsorted", f"segment {i} precedes segment {i - 1}", i))

    last: dict[int, tuple[int, float]] = {}
    for i in sorted(range(len(ann.segments)), key=lambda j: keys[j]):
        s = ann.segments[i]
        prev = last.get(s.speaker)
        if prev is not None and s.start < prev[1]:
            out.append(Violation(
                "same_speaker_overlap",
                f"speaker {s.speaker}: segment {i} overlaps segment {prev[0]} "
                f"by {prev[1] - s.start:.2f}s", i))
        if prev is None or s.end > prev[1]:
            last[s.speaker] = (i, s.end)
    return out


# -- JSONL ---------------------------------------------------------------

def segments_to_jsonl(session_id: str, segments: Iterable[Segment]) -> str:
    return "".join(
        json.dumps(s.to_record(session_id), ensure_ascii=False) + "\n" for s in segments
    )


def write_transcript_jsonl(path, sessions: Mapping[str, Iterable[Segment]] | SessionAnnotation) -> None:
    if isinstance(sessions, SessionAnnotation):
        sessions = {sessions.session_id: sessions.segments}
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(sessions):
            fh.write(segments_to_jsonl(sid, sessions[sid]))


def write_annotation_jsonl(path, sessions: Iterable[SessionAnnotation]) -> None:
    """Like :func:`write_transcript_jsonl`, but every line also carries the
    session ``duration`` and ``audio_ref`` so they survive a round trip."""
    by_id = {a.session_id: a for a in sessions}
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(by_id):
            a = by_id[sid]
            for s in a.segments:
                rec = s.to_record(sid)
                rec.update(duration=round(a.duration, 2), audio_ref=a.audio_ref)
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_transcript_jsonl(path) -> dict[str, SessionAnnotation]:
    """Read one segment per line, grouped into sessions by ``session_id``.

    Optional ``duration`` and ``audio_ref`` keys on any line of a session are
    honoured; otherwise the duration is the latest segment end.
    """
    grouped: dict[str, list[Segment]] = {}
    extra: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                sid = str(rec.get("session_id", Path(path).stem))
                grouped.setdefault(sid, []).append(Segment.from_record(rec))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad transcript record ({exc})") from exc
            meta = extra.setdefault(sid, {})
            for key in ("duration", "audio_ref"):
                if key in rec:
                    meta[key] = rec[key]
    out = {}
    for sid, segs in grouped.items():
        meta = extra.get(sid, {})
        dur = meta.get("duration")
        out[sid] = SessionAnnotation.from_segments(
            sid, segs, duration=None if dur is None else float(dur),
            audio_ref=str(meta.get("audio_ref", "")))
    return out


# -- RTTM ----------------------------------------------------------------

def rttm_lines(session_id: str, segments: Iterable[Segment]) -> list[str]:
    return [
        f"SPEAKER {session_id} 1 {s.start:.2f} {s.duration:.2f} <NA> <NA> spk{s.speaker} <NA> <NA>"
        for s in segments
    ]


def write_rttm(path, sessions: Mapping[str, Iterable[Segment]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(sessions):
            for line in rttm_lines(sid, sessions[sid]):
                fh.write(line + "\n")


def read_rttm(path) -> dict[str, list[Segment]]:
    """Parse ``SPEAKER`` lines. ``spk<k>`` names keep ``k``; other names are
    numbered after the largest ``k`` in order of first appearance."""
    rows: dict[str, list[tuple[str, float, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0] != "SPEAKER":
                continue
            if len(parts) < 8:
                raise ValueError(f"{path}:{lineno}: short RTTM line")
            start, dur = quantize_time(float(parts[3])), float(parts[4])
            rows.setdefault(parts[1], []).append((parts[7], start, quantize_time(start + dur)))
    out = {}
    for sid, items in rows.items():
        names: dict[str, int] = {}
        for name, _, _ in items:
            if name.startswith("spk") and name[3:].isdigit() and int(name[3:]) > 0:
                names[name] = int(name[3:])
        nxt = max(names.values(), default=0)
        for name, _, _ in items:
            if name not in names:
                nxt += 1
                names[name] = nxt
        out[sid] = sort_segments(
            Segment(names[n], Gender.UNKNOWN, TimeInterval(a, b), "") for n, a, b in items if b > a
        )
    return out
