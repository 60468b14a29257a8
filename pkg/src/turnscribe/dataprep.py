"""Training examples for the three-stage curriculum.

Stage 1 asks for the whole structured transcript of a session in one pass.
Stage 2 asks for one observation at a time, conditioned on teacher-forced
history. Stage 3 is stage 2 with sampled cache entries from earlier speech
prepended. Nothing here trains anything; examples are serialized as
prompt/target pairs with audio by reference.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .boundary import BoundaryDecision, Observation, build_observations, next_boundary_target
from .cache import simulate_training_cache
from .config import GlobalConfig
from .errors import InvalidSession, NoHistory
from .protocol import (
    TASK_GLOBAL,
    TASK_OBSERVE,
    TurnOutput,
    Window,
    build_prompt,
    serialize_turn_output,
)
from .timeline import Segment, SessionAnnotation, TimeInterval, sort_segments, validate_session

__all__ = [
    "TrainingExample",
    "FULL_TASK",
    "FULL_INSTRUCTION",
    "emit_stage_examples",
    "emit_dataset",
    "examples_to_jsonl",
    "session_rng",
]

FULL_TASK = "full"
FULL_INSTRUCTION = (
    "Transcribe the whole recording. Start with the summary line "
    "'speakers: N; genders: ...', then one line per utterance in time order: "
    "'[start-end] spkK (gender): text'."
)


@dataclass(frozen=True, slots=True)
class TrainingExample:
    """One prompt/target pair.

    ``boundary_bins`` holds the discretized start and end of the next
    observation when the target continues, else ``None``.
    """

    stage: int
    prompt: dict
    target: str
    boundary_bins: tuple[int, int] | None = None
    session_id: str = ""

    def to_record(self) -> dict:
        return {
            "session_id": self.session_id,
            "stage": self.stage,
            "prompt": self.prompt,
            "target": self.target,
            "boundary_bins": None if self.boundary_bins is None else list(self.boundary_bins),
        }


@dataclass(frozen=True, slots=True)
class _Turn:
    # The fields build_prompt reads from a history entry.
    index: int
    task: str
    observation: TimeInterval | None
    raw: str


def session_rng(seed: int, session_id: str) -> random.Random:
    """Per-session generator, independent of processing order."""
    return random.Random(f"{seed}|prep|{session_id}")


def _check(session: SessionAnnotation) -> None:
    problems = validate_session(session)
    if problems:
        raise InvalidSession(
            f"{session.session_id}: {len(problems)} annotation problem(s), first: {problems[0].message}",
            problems)


def _summary(session: SessionAnnotation, decision: BoundaryDecision | None = None) -> TurnOutput:
    speakers = session.speakers
    genders = Counter(session.speaker_genders.get(s).value for s in speakers)
    return TurnOutput.global_summary(len(speakers), genders, decision)


def _history(session: SessionAnnotation, observations: Sequence[Observation], i: int,
             relabel=None) -> list[_Turn]:
    """Ground-truth turns before observation ``i`` (0-based)."""
    relabel = relabel or (lambda s: s)
    first = observations[0].interval if observations else None
    summary = _summary(session, BoundaryDecision.continue_with(first) if first else None)
    whole = TimeInterval(0.0, session.duration)
    turns = [_Turn(1, TASK_GLOBAL, whole, serialize_turn_output(summary))]
    for j in range(i):
        obs = observations[j]
        out = TurnOutput.segment_turn([relabel(s) for s in obs.members],
                                      next_boundary_target(observations, j + 1))
        turns.append(_Turn(j + 2, TASK_OBSERVE, obs.interval, serialize_turn_output(out)))
    return turns


def _stage1(session: SessionAnnotation) -> list[TrainingExample]:
    window = Window(session.audio_ref, 0.0, session.duration)
    prompt = build_prompt(TimeInterval(0.0, session.duration), [], [], task=TASK_GLOBAL,
                          window=window, turn=1)
    prompt.update(task=FULL_TASK, instruction=FULL_INSTRUCTION)
    header = serialize_turn_output(_summary(session))
    body = serialize_turn_output(TurnOutput.segment_turn(session.segments, None))
    target = header + ("\n" + body if body else "")
    return [TrainingExample(1, prompt, target, None, session.session_id)]


def _observe_example(stage, session, observations, i, cfg, history, cache, members):
    decision = next_boundary_target(observations, i + 1)
    window = Window(session.audio_ref, 0.0, session.duration)
    prompt = build_prompt(observations[i].interval, history, cache, task=TASK_OBSERVE,
                          window=window, turn=i + 2)
    target = serialize_turn_output(TurnOutput.segment_turn(members, decision))
    return TrainingExample(stage, prompt, target, decision.bins(cfg.bin_width), session.session_id)


def emit_stage_examples(session: SessionAnnotation, stage: int, cfg: GlobalConfig | None = None,
                        rng: random.Random | None = None) -> list[TrainingExample]:
    """Examples of one curriculum stage for one annotated session.

    Stage 1 yields one example: the summary header then every segment.
    Stage 2 yields one example per observation, with ground-truth history
    and an empty cache. Stage 3 yields one per observation that has speech
    ending before it: the cache is sampled from that speech and speakers
    are renumbered by first appearance over the cache block followed by the
    speech from the observation on. Speakers heard only in the history
    take the next free labels.

    Raises:
        InvalidSession: ``session`` fails :func:`validate_session`.
        ValueError: ``stage`` is not 1, 2 or 3, or stage 3 without ``rng``.
    """
    cfg = cfg or GlobalConfig()
    _check(session)
    if stage == 1:
        return _stage1(session)
    if stage not in (2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage!r}")
    observations = build_observations(session.segments, cfg.tau)
    out = []
    if stage == 2:
        for i, obs in enumerate(observations):
            history = _history(session, observations, i)
            out.append(_observe_example(2, session, observations, i, cfg, history, [], obs.members))
        return out

    if rng is None:
        raise ValueError("stage 3 samples the cache and needs an rng")
    for i, obs in enumerate(observations):
        try:
            cache, _, remap = simulate_training_cache(session, obs.interval.start, rng)
        except NoHistory:
            continue
        labels = dict(remap)
        for s in sort_segments(m for o in observations[:i] for m in o.members):
            if s.speaker not in labels:
                labels[s.speaker] = len(labels) + 1

        def relabel(s: Segment, labels=labels) -> Segment:
            return s.with_speaker(labels[s.speaker])

        history = _history(session, observations, i, relabel)
        out.append(_observe_example(3, session, observations, i, cfg, history, cache,
                                    [relabel(s) for s in obs.members]))
    return out


def emit_dataset(sessions: Iterable[SessionAnnotation], stage: int, cfg: GlobalConfig | None = None,
                 *, jobs: int = 1) -> list[TrainingExample]:
    """Examples for many sessions, in input order.

    Each session draws from its own :func:`session_rng`, so the output does
    not depend on ``jobs``.
    """
    cfg = cfg or GlobalConfig()
    sessions = list(sessions)

    def one(sess):
        return emit_stage_examples(sess, stage, cfg, session_rng(cfg.seed, sess.session_id))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(one, sessions))
    else:
        parts = [one(s) for s in sessions]
    return [ex for part in parts for ex in part]


def examples_to_jsonl(examples: Iterable[TrainingExample]) -> str:
    return "".join(json.dumps(ex.to_record(), ensure_ascii=False, sort_keys=True) + "\n"
                   for ex in examples)
