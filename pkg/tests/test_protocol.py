from __future__ import annotations

import base64
import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.io import wavfile

from turnscribe.audio import AudioBuffer
from turnscribe.boundary import BoundaryDecision
from turnscribe.cache import CacheEntry
from turnscribe.errors import UnparseableTurn
from turnscribe.protocol import (
    GRAMMAR_VERSION,
    INSTRUCTIONS,
    TASK_ANSWER,
    TASK_GLOBAL,
    TASK_OBSERVE,
    TurnOutput,
    Window,
    build_prompt,
    format_segment,
    parse_turn_output,
    prompt_bytes,
    relabel_cache,
    serialize_turn_output,
)
from turnscribe.timeline import Gender, Segment, TimeInterval

from conftest import seg


def test_format_segment():
    assert format_segment(seg(2, 1.5, 3.25, "你好", "female")) == "[1.50-3.25] spk2 (female): 你好"


def test_parse_summary_with_next():
    out = parse_turn_output("speakers: 3; genders: male=2, female=1\nnext: [0.31-3.46]")
    assert out.kind == "global_summary"
    assert out.speaker_count == 3
    assert out.gender_counts == {Gender.MALE: 2, Gender.FEMALE: 1}
    assert out.decision == BoundaryDecision.continue_with(TimeInterval(0.31, 3.46))


def test_parse_segment_turn():
    raw = "[0.00-1.00] spk1 (male): 甲乙\n[0.50-0.90] spk2 (unknown): 丙\nnext: terminate"
    out = parse_turn_output(raw)
    assert out.kind == "segment_turn"
    assert [s.speaker for s in out.segments] == [1, 2]
    assert out.decision.is_terminal
    assert out.repairs == ()


def test_malformed_lines_are_skipped_and_recorded():
    raw = "[0.00-1.00] spk1 (male): ok\nthis is noise\n[2.00-1.00] spk1 (male): reversed\nnext: [3-4]"
    out = parse_turn_output(raw)
    assert len(out.segments) == 1
    assert len(out.repairs) == 2
    assert out.decision.next_interval == TimeInterval(3, 4)


def test_missing_boundary_is_a_repair():
    out = parse_turn_output("[0.00-1.00] spk1 (male): x")
    assert out.decision is None
    assert out.repairs == ("missing boundary line",)


def test_spk0_rejected():
    with pytest.raises(UnparseableTurn):
        parse_turn_output("[0.00-1.00] spk0 (male): x")


@pytest.mark.parametrize("raw", ["", "hello", "   \n\n"])
def test_unparseable(raw):
    with pytest.raises(UnparseableTurn):
        parse_turn_output(raw)


def test_answer_block():
    out = parse_turn_output("ok\n<answer>\n[0.00-1.00] spk1 (male): x\n</answer>")
    assert out.kind == "final_answer" and len(out.segments) == 1
    unterminated = parse_turn_output("<answer>\n[0.00-1.00] spk1 (male): x\n")
    assert unterminated.repairs == ("missing </answer>",)


def test_summary_ignores_segment_lines():
    out = parse_turn_output("speakers: 1; genders: male=1\n[0.00-1.00] spk1 (male): x")
    assert out.kind == "global_summary"
    assert "ignored" in out.repairs[0]


texts = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Cc", "Zl", "Zp"),
                                       blacklist_characters="\n\r\x85"), max_size=10)
segments = st.builds(
    lambda s, a, d, g, t: Segment(s, g, TimeInterval(a / 100, (a + d) / 100), t),
    st.integers(1, 9), st.integers(0, 10000), st.integers(1, 1000), st.sampled_from(list(Gender)), texts)
decisions = st.one_of(
    st.just(BoundaryDecision.terminate()),
    st.builds(lambda a, d: BoundaryDecision.continue_with(TimeInterval(a / 100, (a + d) / 100)),
              st.integers(0, 10000), st.integers(1, 1000)))
turn_outputs = st.one_of(
    st.builds(TurnOutput.global_summary, st.integers(0, 9),
              st.dictionaries(st.sampled_from(list(Gender)), st.integers(0, 5)), st.none() | decisions),
    st.builds(TurnOutput.segment_turn, st.lists(segments, min_size=1, max_size=5), decisions),
    st.builds(lambda d: TurnOutput.segment_turn([], d), decisions),
    st.builds(TurnOutput.final_answer, st.lists(segments, max_size=5)),
)


@given(turn_outputs)
def test_grammar_round_trip(out):
    assert parse_turn_output(serialize_turn_output(out)) == out


def _cache():
    return [CacheEntry(7, TimeInterval(5, 6), "late", "a.wav"), CacheEntry(4, TimeInterval(1, 2), "early", "a.wav")]


def test_relabel_cache_by_first_appearance():
    local, order = relabel_cache(_cache())
    assert order == [4, 7]
    assert [(e.speaker, e.transcript) for e in local] == [(1, "early"), (2, "late")]


def test_prompt_layout_cache_before_history():
    class H:
        index, task, observation, raw = 1, TASK_GLOBAL, TimeInterval(0, 40), "speakers: 2"

    p = build_prompt(TimeInterval(1.234, 2.0), [H(), H()], _cache(), task=TASK_OBSERVE,
                     window=Window("w.wav", 10.0, 40.0), turn=3)
    assert list(p) == ["cache", "history", "observation", "instruction", "task", "turn", "grammar"]
    assert [c["speaker"] for c in p["cache"]] == [1, 2]
    assert p["observation"] == {"start": 1.23, "end": 2.0, "offset": 10.0, "window": 40.0, "audio_ref": "w.wav"}
    assert p["instruction"] == INSTRUCTIONS[TASK_OBSERVE]
    assert p["grammar"] == GRAMMAR_VERSION
    assert json.loads(prompt_bytes(p)) == p


def test_answer_prompt_has_no_observation():
    p = build_prompt(None, [], [], task=TASK_ANSWER, window=Window("w", 0, 1), turn=5)
    assert p["observation"] is None


def test_embedded_audio_is_wav():
    rate = 8000
    audio = AudioBuffer(np.linspace(-0.5, 0.5, rate * 2), rate, "w.wav")
    p = build_prompt(TimeInterval(0.5, 1.0), [], [CacheEntry(1, TimeInterval(0, 0.25), "x", "w.wav")],
                     task=TASK_OBSERVE, window=Window("w.wav", 0, 2), turn=2, audio=audio, source=audio,
                     embed_audio=True)
    assert "audio_ref" not in p["observation"] and "audio_ref" not in p["cache"][0]
    r, x = wavfile.read(io.BytesIO(base64.b64decode(p["observation"]["audio_b64"])))
    assert r == rate and len(x) == rate // 2
    r, x = wavfile.read(io.BytesIO(base64.b64decode(p["cache"][0]["audio_b64"])))
    assert len(x) == rate // 4


def test_embedding_needs_buffers():
    with pytest.raises(ValueError):
        build_prompt(TimeInterval(0, 1), [], [], task=TASK_OBSERVE, window=Window("w", 0, 2), turn=2,
                     embed_audio=True)
