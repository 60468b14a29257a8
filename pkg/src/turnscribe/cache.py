"""Speaker-aware context cache: inference-time selection and training-time
simulation."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator

from .errors import DegenerateBuffer, NoHistory
from .timeline import Segment, SessionAnnotation, TimeInterval, reassign_labels, sort_segments
from .validation import check_positive

__all__ = [
    "DEFAULT_ALPHA",
    "DEFAULT_K",
    "CacheEntry",
    "BufferedObservation",
    "ObservationBuffer",
    "cache_score",
    "select_cache",
    "flatten_cache",
    "cache_speaker_order",
    "simulate_training_cache",
    "CacheSelector",
]

DEFAULT_ALPHA = 0.5
DEFAULT_K = 3
MAX_SEGMENTS_PER_SPEAKER = 5


@dataclass(frozen=True, slots=True)
class CacheEntry:
    """A speaker reference: label, audio span and its transcript.

    ``position`` and ``score`` record where selection found the entry; they
    take no part in equality.
    """

    speaker: int
    interval: TimeInterval
    transcript: str
    audio_ref: str = ""
    position: int = field(default=0, compare=False)
    score: float = field(default=math.nan, compare=False)

    @property
    def start(self) -> float:
        return self.interval.start

    @property
    def end(self) -> float:
        return self.interval.end

    def to_record(self) -> dict:
        return {
            "speaker": self.speaker,
            "start": round(self.start, 2),
            "end": round(self.end, 2),
            "transcript": self.transcript,
            "audio_ref": self.audio_ref,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "CacheEntry":
        return cls(int(rec["speaker"]), TimeInterval(float(rec["start"]), float(rec["end"])),
                   str(rec.get("transcript", "")), str(rec.get("audio_ref", "")))

    @classmethod
    def from_segment(cls, seg: Segment, audio_ref: str = "", position: int = 0,
                     score: float = math.nan) -> "CacheEntry":
        return cls(seg.speaker, seg.interval, seg.text, audio_ref, position, score)

    def as_segment(self) -> Segment:
        from .timeline import Gender

        return Segment(self.speaker, Gender.UNKNOWN, self.interval, self.transcript)


@dataclass(frozen=True, slots=True)
class BufferedObservation:
    interval: TimeInterval
    segments: tuple[Segment, ...]
    audio_ref: str = ""


class ObservationBuffer:
    """Processed observations in processing order.

    Owned by one orchestration loop; selection works on ``snapshot()``.
    """

    def __init__(self, audio_ref: str = ""):
        self.audio_ref = audio_ref
        self._items: list[BufferedObservation] = []

    def append(self, interval: TimeInterval, segments: Iterable[Segment],
               audio_ref: str | None = None) -> None:
        self._items.append(BufferedObservation(
            interval, tuple(segments), self.audio_ref if audio_ref is None else audio_ref))

    def snapshot(self) -> tuple[BufferedObservation, ...]:
        return tuple(self._items)

    def speakers(self) -> set[int]:
        return {s.speaker for o in self._items for s in o.segments}

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self.snapshot())


def cache_score(d: float, i: int, n: int, alpha: float = DEFAULT_ALPHA) -> float:
    """Duration weighted by recency: ``d * (1 + alpha * i / n)``."""
    if n < 1:
        raise DegenerateBuffer("cache score needs a non-empty buffer")
    if not 1 <= i <= n:
        raise ValueError(f"position {i} outside 1..{n}")
    return d * (1 + alpha * (i / n))


def select_cache(buffer, speakers: Iterable[int], alpha: float = DEFAULT_ALPHA,
                 k: int = DEFAULT_K, *, before: float | None = None) -> dict[int, list[CacheEntry]]:
    """Top-``k`` reference segments per requested speaker.

    Every segment of a requested speaker in buffer observation ``i`` (of
    ``n``) scores :func:`cache_score`; each speaker keeps its ``k`` best.
    Equal scores prefer the later observation, then the earlier start.

    Args:
        buffer: An ``ObservationBuffer`` or a sequence of
            ``BufferedObservation`` / segment lists.
        speakers: Labels to select for; others are ignored.
        before: If given, segments ending after this time are skipped.

    Returns:
        ``{speaker: entries}`` for every requested speaker, best first, or
        an empty mapping when the buffer is empty.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    check_positive("alpha", alpha, strict=False)
    items = buffer.snapshot() if isinstance(buffer, ObservationBuffer) else tuple(buffer)
    n = len(items)
    if n == 0:
        return {}
    wanted = set(speakers)
    default_ref = buffer.audio_ref if isinstance(buffer, ObservationBuffer) else ""
    candidates: dict[int, list[tuple]] = {s: [] for s in wanted}
    for i, obs in enumerate(items, 1):
        segs = obs.segments if isinstance(obs, BufferedObservation) else obs
        ref = obs.audio_ref if isinstance(obs, BufferedObservation) else default_ref
        rho = i / n
        for seg in segs:
            if seg.speaker not in wanted:
                continue
            if before is not None and seg.end > before:
                continue
            phi = seg.duration * (1 + alpha * rho)
            candidates[seg.speaker].append((-phi, -i, seg.start, seg.end, seg.text, seg, ref))
    out = {}
    for s in sorted(wanted):
        ranked = sorted(candidates[s], key=lambda c: c[:5])[: int(k)]
        out[s] = [CacheEntry.from_segment(c[5], c[6], -c[1], -c[0]) for c in ranked]
    return out


def flatten_cache(cache: Mapping[int, Sequence[CacheEntry]] | Iterable[CacheEntry]) -> list[CacheEntry]:
    """All entries in chronological order, the order they are prompted in."""
    if isinstance(cache, Mapping):
        entries = [e for v in cache.values() for e in v]
    else:
        entries = list(cache)
    return sorted(entries, key=lambda e: (e.start, e.speaker, e.end, e.transcript))


def cache_speaker_order(entries: Sequence[CacheEntry]) -> list[int]:
    """Speakers by first appearance in the prompted cache block."""
    order: list[int] = []
    for e in flatten_cache(entries):
        if e.speaker not in order:
            order.append(e.speaker)
    return order


def simulate_training_cache(session: SessionAnnotation, cut: float, rng: random.Random,
                            *, max_per_speaker: int = MAX_SEGMENTS_PER_SPEAKER):
    """Sample cache context from speech entirely before ``cut``.

    A non-empty subset of the speakers active before ``cut`` is drawn
    uniformly; each chosen speaker contributes ``u ~ U{1..max_per_speaker}``
    of their earlier segments (fewer if unavailable). Labels are then
    renumbered by first appearance over the cache block followed by the
    segments starting at or after ``cut``.

    Returns:
        ``(cache, after, remap)``: relabeled cache entries in prompt order,
        the relabeled segments starting at or after ``cut``, and the
        ``old -> new`` label table over the speakers of both.

    Raises:
        NoHistory: no segment ends at or before ``cut``.
    """
    early = [s for s in session.segments if s.end <= cut]
    if not early:
        raise NoHistory(f"{session.session_id}: no speech before {cut}")
    eligible = sorted({s.speaker for s in early})
    mask = rng.randint(1, 2 ** len(eligible) - 1)
    chosen = [spk for b, spk in enumerate(eligible) if mask >> b & 1]
    picked: list[Segment] = []
    for spk in chosen:
        own = [s for s in early if s.speaker == spk]
        u = rng.randint(1, max_per_speaker)
        picked.extend(rng.sample(own, min(u, len(own))))
    picked = sort_segments(picked)

    after = [s for s in session.segments if s.start >= cut]
    _, remap = reassign_labels(picked + sort_segments(after))
    cache = [CacheEntry(remap[s.speaker], s.interval, s.text, session.audio_ref) for s in picked]
    return cache, [s.with_speaker(remap[s.speaker]) for s in after], remap


class CacheSelector(BaseEstimator):
    """Estimator wrapper around :func:`select_cache`."""

    def __init__(self, alpha: float = DEFAULT_ALPHA, k: int = DEFAULT_K):
        self.alpha = alpha
        self.k = k

    def fit(self, X=None, y=None):
        return self

    def transform(self, buffer, speakers=None, before=None) -> dict[int, list[CacheEntry]]:
        if speakers is None:
            if isinstance(buffer, ObservationBuffer):
                speakers = buffer.speakers()
            else:
                speakers = {s.speaker for o in buffer
                            for s in (o.segments if isinstance(o, BufferedObservation) else o)}
        return select_cache(buffer, speakers, self.alpha, self.k, before=before)
