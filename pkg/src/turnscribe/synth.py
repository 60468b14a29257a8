"""Synthetic meetings and an annotation-reading oracle backend.

The oracle answers protocol turns from ground truth, optionally corrupted,
which makes the orchestration loop and the metrics checkable end to end
without a speech model. It never looks at audio; the rendered audio is a
placeholder with one sinusoid band per speaker.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .audio import AudioBuffer
from .boundary import BoundaryDecision, build_observations, next_boundary_target
from .errors import ConfigError, OracleRangeError
from .protocol import (
    INSTRUCTIONS,
    TASK_ANSWER,
    TASK_GLOBAL,
    TASK_OBSERVE,
    TurnOutput,
    parse_turn_output,
    serialize_turn_output,
)
from .timeline import Gender, Segment, SessionAnnotation, TimeInterval, reassign_labels, sort_segments
from .validation import check_positive, check_probability, check_tau, quantize_time

__all__ = [
    "SynthConfig",
    "CorruptionConfig",
    "TOKEN_INVENTORY",
    "generate_session",
    "render_audio",
    "speech_regions",
    "OracleBackend",
    "oracle_generate",
    "derive_seed",
]

_INVENTORY_SIZE = 500


def _build_inventory() -> tuple[str, ...]:
    rng = random.Random(20240501)
    tokens: set[str] = set()
    while len(tokens) < _INVENTORY_SIZE:
        n = rng.choice((1, 2, 2, 3))
        tokens.add("".join(chr(0x4E00 + rng.randrange(0x5000)) for _ in range(n)))
    return tuple(sorted(tokens))


TOKEN_INVENTORY = _build_inventory()
_CHARSET = sorted({ch for tok in TOKEN_INVENTORY for ch in tok})


def derive_seed(root: int, index: int) -> int:
    """Per-session seed from a root seed; stable across runs and platforms."""
    return random.Random(f"{root}:{index}").getrandbits(31)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the turn-taking simulator.

    The speaker count is drawn uniformly from ``[min_speakers,
    max_speakers]``. Utterance lengths are normal with ``mean_utterance``
    and ``utterance_spread`` seconds, clipped to at least one second.
    """

    seed: int
    duration: float = 45.0
    min_speakers: int = 2
    max_speakers: int = 4
    overlap_prob: float = 0.2
    backchannel_prob: float = 0.1
    mean_utterance: float = 3.0
    utterance_spread: float = 1.0
    female_prob: float = 0.5
    stay_prob: float = 0.1
    sample_rate: int = 16000
    session_id: str | None = None

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        check_positive("duration", self.duration)
        for name in ("overlap_prob", "backchannel_prob", "female_prob", "stay_prob"):
            check_probability(name, getattr(self, name))
        if not 1 <= self.min_speakers <= self.max_speakers:
            raise ConfigError(f"bad speaker range {self.min_speakers}..{self.max_speakers}")
        check_positive("mean_utterance", self.mean_utterance)
        check_positive("utterance_spread", self.utterance_spread, strict=False)
        if int(self.sample_rate) <= 0:
            raise ConfigError("sample_rate must be positive")


@dataclass(frozen=True)
class CorruptionConfig:
    """Error injection for the oracle. All zeros is the exact oracle.

    ``timestamp_jitter`` is the standard deviation (seconds) of a normal
    offset on each boundary, truncated at 1.5 deviations.
    """

    label_swap_prob: float = 0.0
    timestamp_jitter: float = 0.0
    char_error_prob: float = 0.0
    speaker_count_error_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("label_swap_prob", "char_error_prob", "speaker_count_error_prob"):
            check_probability(name, getattr(self, name))
        check_positive("timestamp_jitter", self.timestamp_jitter, strict=False)

    @property
    def is_exact(self) -> bool:
        return not (self.label_swap_prob or self.timestamp_jitter or self.char_error_prob
                    or self.speaker_count_error_prob)


# -- session generation ---------------------------------------------------

def _text_for(rng: random.Random, seconds: float) -> str:
    n = max(1, round(seconds * 1.5))
    return "".join(rng.choice(TOKEN_INVENTORY) for _ in range(n))


def generate_session(cfg: SynthConfig) -> tuple[SessionAnnotation, AudioBuffer]:
    """Simulate a meeting and render placeholder audio.

    A Markov chain over speakers produces the main turns: the next speaker
    differs from the current one with probability ``1 - stay_prob``, and
    every speaker is visited once before the chain runs free. With
    ``overlap_prob`` a turn starts before the previous one ends; otherwise
    a 0.2-1.2 s gap follows. With ``backchannel_prob`` a short (<1 s)
    utterance by another speaker is placed strictly inside the turn.
    Same-speaker segments are kept at least 0.5 s apart.

    Raises:
        ConfigError: the duration cannot fit one turn per speaker.
    """
    rng = random.Random(cfg.seed)
    n_spk = rng.randint(cfg.min_speakers, cfg.max_speakers)
    need = n_spk * (1.0 + 0.2)
    if cfg.duration < need:
        raise ConfigError(f"{cfg.duration}s is too short for {n_spk} speakers (need {need:.1f}s)")
    genders = {k: (Gender.FEMALE if rng.random() < cfg.female_prob else Gender.MALE)
               for k in range(1, n_spk + 1)}
    intro = list(range(1, n_spk + 1))
    rng.shuffle(intro)

    free_at = {k: 0.0 for k in genders}  # earliest next start per speaker
    segs: list[tuple[int, float, float, str]] = []
    T = cfg.duration
    t = quantize_time(rng.uniform(0.0, 0.5))
    cur = None
    turn = 0
    while True:
        if turn < n_spk:
            spk = intro[turn]
        elif cur is not None and rng.random() < cfg.stay_prob:
            spk = cur
        else:
            spk = rng.choice([k for k in genders if k != cur] or [cur])
        start = max(t, free_at[spk])
        remaining_intro = n_spk - turn - 1 if turn < n_spk else 0
        length = max(1.0, rng.gauss(cfg.mean_utterance, cfg.utterance_spread))
        if remaining_intro:
            # Leave room for the speakers still waiting for a first turn.
            length = min(length, (T - start) / (remaining_intro + 1) - 0.2)
        end = quantize_time(min(start + length, T))
        start = quantize_time(start)
        if end - start < 1.0 - 1e-9:
            if turn < n_spk:
                raise ConfigError(f"{T}s could not fit a first turn for all {n_spk} speakers")
            break
        segs.append((spk, start, end, _text_for(rng, end - start)))
        free_at[spk] = end + 0.5

        if rng.random() < cfg.backchannel_prob and end - start >= 1.6:
            others = [k for k in genders if k != spk]
            if others:
                who = rng.choice(others)
                bl = quantize_time(rng.uniform(0.3, 0.9))
                lo, hi = max(start + 0.2, free_at[who]), end - 0.2 - bl
                if hi > lo:
                    bs = quantize_time(rng.uniform(lo, hi))
                    be = quantize_time(bs + bl)
                    if bs > start and be < end:
                        segs.append((who, bs, be, _text_for(rng, be - bs)))
                        free_at[who] = be + 0.5

        if rng.random() < cfg.overlap_prob:
            t = end - rng.uniform(0.2, min(1.5, 0.5 * (end - start)))
        else:
            t = end + rng.uniform(0.2, 1.2)
        t = quantize_time(t)
        cur = spk
        turn += 1
        if t >= T - 1.0:
            if turn < n_spk:
                raise ConfigError(f"{T}s could not fit a first turn for all {n_spk} speakers")
            break

    raw = sort_segments(Segment(spk, genders[spk], TimeInterval(a, b), text) for spk, a, b, text in segs)
    relabeled, remap = reassign_labels(raw)
    sid = cfg.session_id or f"synth{cfg.seed:06d}"
    ann = SessionAnnotation.from_segments(
        sid, relabeled, duration=T, audio_ref=f"{sid}.wav",
        speaker_genders={remap[k]: g for k, g in genders.items() if k in remap})
    return ann, render_audio(ann, cfg.sample_rate)


def render_audio(ann: SessionAnnotation, sample_rate: int = 16000) -> AudioBuffer:
    """One sinusoid band per speaker over each of their segments."""
    n = int(round(ann.duration * sample_rate))
    out = np.zeros(n, dtype=np.float64)
    amp = 0.25
    for seg in ann.segments:
        lo = int(np.floor(seg.start * sample_rate + 1e-7))
        hi = min(n, int(np.floor(seg.end * sample_rate + 1e-7)))
        if hi <= lo:
            continue
        t = np.arange(hi - lo) / sample_rate
        f0 = 120.0 + 45.0 * seg.speaker
        wave = np.sin(2 * np.pi * f0 * t) + 0.5 * np.sin(2 * np.pi * 2.0 * f0 * t)
        out[lo:hi] += amp * wave / 1.5
    np.clip(out, -1.0, 1.0, out=out)
    return AudioBuffer(out, sample_rate, ann.audio_ref)


def speech_regions(segments: Sequence[Segment]) -> list[TimeInterval]:
    """Union of segment intervals; usable as precomputed VAD."""
    out: list[list[float]] = []
    for s in sort_segments(segments):
        if out and s.start <= out[-1][1]:
            out[-1][1] = max(out[-1][1], s.end)
        else:
            out.append([s.start, s.end])
    return [TimeInterval(a, b) for a, b in out]


# -- oracle ----------------------------------------------------------------

_TASK_BY_INSTRUCTION = {v: k for k, v in INSTRUCTIONS.items()}


def _task_of(payload: Mapping) -> str:
    task = payload.get("task") or _TASK_BY_INSTRUCTION.get(payload.get("instruction", ""))
    if task not in (TASK_GLOBAL, TASK_OBSERVE, TASK_ANSWER):
        raise ValueError("payload names no known task")
    return task


def _match_truth(truth: Sequence[Segment], start: float, end: float, text: str) -> Segment | None:
    iv = TimeInterval(start, end)
    best, score = None, 0.0
    for s in truth:
        ov = s.interval.intersection(iv)
        sc = ov + (1e-3 if s.text == text else 0.0)
        if ov > 0 and sc > score:
            best, score = s, sc
    return best


class OracleBackend:
    """Answers protocol turns from a ground-truth annotation.

    The window a prompt refers to is ``[offset, offset + window)`` of the
    annotation's timeline; the oracle's truth for it is every segment that
    starts inside. Speakers named in the prompt's cache keep their prompt
    labels (identified through the cached spans); all others are numbered
    after them by first appearance in the window.

    Observation turns return the members of the matching ground-truth
    observation and its boundary target. The answer turn consolidates the
    segments already given in the history.

    Corruption is a deterministic function of the segment and
    ``corruption.seed``, so a segment repeated across turns is corrupted
    identically.
    """

    supports_audio_bytes = False
    serial = False

    def __init__(self, truth: SessionAnnotation, corruption: CorruptionConfig | None = None,
                 tau: float = 0.8):
        self.truth = truth
        self.corruption = corruption or CorruptionConfig()
        self.tau = check_tau(tau)

    def generate(self, payload: Mapping) -> str:
        return oracle_generate(payload, self.truth, self.corruption, tau=self.tau)


def _window_view(payload: Mapping, truth: SessionAnnotation):
    obs = payload.get("observation") or {}
    offset = float(obs.get("offset", 0.0))
    width = obs.get("window")
    if width is None:
        width = truth.duration - offset
    hi = offset + float(width)
    if offset < 0 or offset > truth.duration + 1e-6:
        raise OracleRangeError(f"window offset {offset} outside the annotation")
    last = hi >= truth.duration - 1e-6
    # Annotation times sit on the 10 ms grid; the tolerance absorbs float sums.
    segs = [s for s in truth.segments
            if offset - 1e-6 <= s.start and (s.start < hi - 1e-6 or last and s.start <= hi + 1e-6)]
    return offset, float(width), segs


def _local_labels(window_segs: Sequence[Segment], cache: Sequence[Mapping],
                  truth: SessionAnnotation) -> dict[int, int]:
    labels: dict[int, int] = {}
    for rec in cache:
        match = _match_truth(truth.segments, float(rec["start"]), float(rec["end"]),
                             str(rec.get("transcript", "")))
        if match is not None and match.speaker not in labels:
            labels[match.speaker] = int(rec["speaker"])
    nxt = max(labels.values(), default=0)
    for s in sort_segments(window_segs):
        if s.speaker not in labels:
            nxt += 1
            labels[s.speaker] = nxt
    return labels


def _corrupt(seg: Segment, n_labels: int, cfg: CorruptionConfig) -> Segment:
    rng = random.Random(f"{cfg.seed}|{seg.speaker}|{seg.start:.2f}|{seg.end:.2f}|{seg.text}")
    u_swap = rng.random()
    swap_to = rng.randrange(max(1, n_labels - 1))
    j0, j1 = rng.gauss(0.0, 1.0), rng.gauss(0.0, 1.0)
    speaker = seg.speaker
    if u_swap < cfg.label_swap_prob and n_labels > 1:
        others = [k for k in range(1, n_labels + 1) if k != seg.speaker]
        speaker = others[swap_to % len(others)]
    start, end = seg.start, seg.end
    if cfg.timestamp_jitter:
        lim = 1.5
        start = quantize_time(max(0.0, start + cfg.timestamp_jitter * max(-lim, min(lim, j0))))
        end = quantize_time(end + cfg.timestamp_jitter * max(-lim, min(lim, j1)))
        if end <= start:
            end = quantize_time(start + 0.01)
    text = seg.text
    if cfg.char_error_prob:
        text = "".join(rng.choice(_CHARSET) if rng.random() < cfg.char_error_prob else ch
                       for ch in text)
    return Segment(speaker, seg.gender, TimeInterval(start, end), text)


def oracle_generate(payload: Mapping, truth: SessionAnnotation,
                    corruption: CorruptionConfig | None = None, *, tau: float = 0.8) -> str:
    """One oracle response in the turn grammar.

    Raises:
        OracleRangeError: the prompt's window or observation lies outside
            the annotation.
    """
    cfg = corruption or CorruptionConfig()
    task = _task_of(payload)
    if task == TASK_ANSWER:
        segs = []
        for h in payload.get("history", []):
            try:
                parsed = parse_turn_output(h["response"])
            except ValueError:
                continue
            if parsed.kind == "segment_turn":
                segs.extend(parsed.segments)
        seen, uniq = set(), []
        for s in segs:
            key = (s.speaker, s.start, s.end, s.text)
            if key not in seen:
                seen.add(key)
                uniq.append(s)
        return serialize_turn_output(TurnOutput.final_answer(sort_segments(uniq)))

    offset, width, window_segs = _window_view(payload, truth)
    labels = _local_labels(window_segs, payload.get("cache", []), truth)
    local = [
        Segment(labels[s.speaker], s.gender,
                TimeInterval(quantize_time(s.start - offset), quantize_time(s.end - offset)), s.text)
        for s in window_segs
    ]
    observations = build_observations(local, tau)
    n_labels = max(labels.values(), default=0)

    if task == TASK_GLOBAL:
        speakers = {s.speaker: s.gender for s in local}
        count = len(speakers)
        if cfg.speaker_count_error_prob:
            rng = random.Random(f"{cfg.seed}|count|{truth.session_id}|{offset:.2f}")
            if rng.random() < cfg.speaker_count_error_prob:
                count = max(0, count + rng.choice((-1, 1)))
        genders: dict[Gender, int] = {}
        for g in speakers.values():
            genders[g] = genders.get(g, 0) + 1
        decision = (BoundaryDecision.continue_with(observations[0].interval) if observations
                    else BoundaryDecision.terminate())
        return serialize_turn_output(TurnOutput.global_summary(count, genders, decision))

    obs = payload.get("observation")
    if obs is None:
        raise OracleRangeError("observation turn without an observation")
    a, b = float(obs["start"]), float(obs["end"])
    if a < -1e-6 or b > width + 1e-6 or a >= b:
        raise OracleRangeError(f"observation [{a}, {b}] outside the {width:.2f}s window")
    idx = next((o.index for o in observations
                if abs(o.interval.start - a) < 5e-3 and abs(o.interval.end - b) < 5e-3), None)
    if idx is not None:
        members = list(observations[idx - 1].members)
        decision = next_boundary_target(observations, idx)
    else:
        members = [s for s in local if a <= (s.start + s.end) / 2 < b]
        later = [o for o in observations if o.interval.start > a]
        decision = (BoundaryDecision.continue_with(later[0].interval) if later
                    else BoundaryDecision.terminate())
    if not cfg.is_exact:
        members = [_corrupt(s, n_labels, cfg) for s in members]
    return serialize_turn_output(TurnOutput.segment_turn(sort_segments(members), decision))
