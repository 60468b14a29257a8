from __future__ import annotations

import random
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from turnscribe.cache import (
    CacheEntry,
    CacheSelector,
    ObservationBuffer,
    cache_score,
    cache_speaker_order,
    flatten_cache,
    select_cache,
    simulate_training_cache,
)
from turnscribe.errors import DegenerateBuffer, NoHistory
from turnscribe.timeline import SessionAnnotation, TimeInterval

from conftest import seg
from oracles import exhaustive_top_k


@pytest.mark.parametrize("d, i, n, alpha, phi", [
    (2.0, 1, 2, 0.5, 2.5),
    (2.0, 2, 2, 0.5, 3.0),
    (1.0, 3, 4, 0.0, 1.0),
    (4.0, 1, 4, 1.0, 5.0),
])
def test_cache_score_frozen(d, i, n, alpha, phi):
    assert cache_score(d, i, n, alpha) == pytest.approx(phi)


def test_cache_score_degenerate():
    with pytest.raises(DegenerateBuffer):
        cache_score(1.0, 1, 0)


def test_empty_buffer_selects_nothing():
    assert select_cache(ObservationBuffer(), {1, 2}) == {}


def test_recency_breaks_duration_ties():
    buf = ObservationBuffer("a.wav")
    buf.append(TimeInterval(0, 2), [seg(1, 0, 2, "old")])
    buf.append(TimeInterval(3, 5), [seg(1, 3, 5, "new")])
    picked = select_cache(buf, {1}, alpha=0.5, k=1)[1]
    assert [e.transcript for e in picked] == ["new"]
    assert picked[0].audio_ref == "a.wav" and picked[0].position == 2


def test_longer_old_segment_can_win():
    buf = ObservationBuffer()
    buf.append(TimeInterval(0, 4), [seg(1, 0, 4, "long")])
    buf.append(TimeInterval(5, 7), [seg(1, 5, 7, "short")])
    assert select_cache(buf, {1}, k=1)[1][0].transcript == "long"


def test_requested_speaker_without_candidates_gets_empty_list():
    buf = ObservationBuffer()
    buf.append(TimeInterval(0, 1), [seg(1, 0, 1)])
    assert select_cache(buf, {1, 7}) == {1: [CacheEntry(1, TimeInterval(0, 1), "", "")], 7: []}


def test_before_filter():
    buf = ObservationBuffer()
    buf.append(TimeInterval(0, 10), [seg(1, 0, 4), seg(1, 6, 10)])
    picked = select_cache(buf, {1}, before=5.0)[1]
    assert [e.end for e in picked] == [4.0]


buffers = st.lists(
    st.lists(st.tuples(st.integers(1, 3), st.integers(0, 40), st.sampled_from([50, 100, 150, 200, 300])),
             min_size=0, max_size=4),
    min_size=1, max_size=20)


@given(buffers, st.integers(1, 4), st.sampled_from([0.0, 0.5, 1.0, 2.0]))
def test_matches_exhaustive_top_k(rows, k, alpha):
    observations = [[seg(s, a / 10, a / 10 + d / 100, f"t{a}") for s, a, d in obs] for obs in rows]
    got = select_cache(observations, {1, 2, 3}, alpha=alpha, k=k)
    for spk in (1, 2, 3):
        want = exhaustive_top_k(observations, spk, alpha, k, cache_score)
        assert [(e.as_segment(), e.position) for e in got[spk]] == want


def test_flatten_and_speaker_order():
    entries = [CacheEntry(2, TimeInterval(5, 6), "b"), CacheEntry(7, TimeInterval(1, 2), "a"),
               CacheEntry(2, TimeInterval(0, 1), "c")]
    assert [e.transcript for e in flatten_cache(entries)] == ["c", "a", "b"]
    assert cache_speaker_order(entries) == [2, 7]


def test_entry_record_round_trip():
    e = CacheEntry(3, TimeInterval(1.25, 2.5), "hi", "a.wav", position=4, score=1.7)
    rec = e.to_record()
    assert rec == {"speaker": 3, "start": 1.25, "end": 2.5, "transcript": "hi", "audio_ref": "a.wav"}
    assert CacheEntry.from_record(rec) == e


def test_selector_estimator():
    sel = CacheSelector(alpha=1.0, k=2)
    assert sel.get_params() == {"alpha": 1.0, "k": 2}
    buf = ObservationBuffer()
    buf.append(TimeInterval(0, 1), [seg(1, 0, 1), seg(2, 0.2, 0.8)])
    assert set(sel.fit().transform(buf)) == {1, 2}


def _session():
    segs = [seg(1, 0, 2, "a"), seg(2, 3, 5, "b"), seg(3, 6, 8, "c"), seg(1, 9, 11, "d"),
            seg(3, 12, 13, "e"), seg(2, 14, 15, "f")]
    return SessionAnnotation.from_segments("s", segs, audio_ref="s.wav")


def test_training_cache_labels_follow_cache():
    ann = _session()
    for seed in range(50):
        cache, after, remap = simulate_training_cache(ann, 9.0, random.Random(seed))
        assert cache, "subset is never empty"
        order = cache_speaker_order(cache)
        assert order == list(range(1, len(order) + 1))
        for e in cache:
            assert e.end <= 9.0
        # Speakers already cached keep the cache label after the cut.
        originals = {g: o for o, g in remap.items()}
        for s in after:
            assert s.start >= 9.0
            assert originals[s.speaker] in {1, 2, 3}
        for e in cache:
            src = [x for x in ann.segments if x.interval == e.interval][0]
            assert remap[src.speaker] == e.speaker


def test_training_cache_example_cached_speaker_keeps_label():
    # Speaker 3 is the only cached speaker, so it is label 1 after the cut too.
    ann = SessionAnnotation.from_segments("s", [seg(3, 0, 1), seg(5, 2, 3), seg(3, 4, 5)])
    rng = random.Random(0)
    while True:
        cache, after, remap = simulate_training_cache(ann, 3.5, rng)
        if {e.speaker for e in cache} == {1} and remap[3] == 1:
            break
    assert after[0].speaker == 1


def test_training_cache_counts_and_subsets():
    ann = _session()
    subsets, sizes = Counter(), Counter()
    rng = random.Random(1)
    for _ in range(2000):
        cache, _, remap = simulate_training_cache(ann, 12.0, rng)
        inv = {v: k for k, v in remap.items()}
        spk = frozenset(inv[e.speaker] for e in cache)
        subsets[spk] += 1
        for s in spk:
            sizes[sum(1 for e in cache if inv[e.speaker] == s)] += 1
    assert len(subsets) == 7
    assert min(subsets.values()) > 2000 / 7 * 0.7
    assert set(sizes) <= {1, 2}


def test_training_cache_no_history():
    with pytest.raises(NoHistory):
        simulate_training_cache(_session(), 1.0, random.Random(0))
