from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from turnscribe.boundary import (
    BoundaryDecision,
    ObservationBuilder,
    build_observations,
    discretize_boundary,
    next_boundary_target,
    observations_to_jsonl,
    overlap_ratios,
    undiscretize_boundary,
)
from turnscribe.errors import ConfigError, RangeError
from turnscribe.timeline import TimeInterval

from conftest import seg


def test_overlap_ratios():
    assert overlap_ratios(TimeInterval(0, 4), TimeInterval(3, 5)) == (0.25, 0.5)


def test_backchannel_merges_into_turn():
    obs = build_observations([seg(1, 0, 5), seg(2, 1, 1.5), seg(1, 6, 8)])
    assert [o.member_ids for o in obs] == [(0, 1), (2,)]
    assert obs[0].interval == TimeInterval(0, 5)


def test_threshold_is_inclusive():
    # 0.8 s of a 1 s segment lies inside the first one: ratio exactly tau.
    obs = build_observations([seg(1, 0, 3), seg(2, 2.2, 3.2)], tau=0.8)
    assert len(obs) == 1
    obs = build_observations([seg(1, 0, 3), seg(2, 2.3, 3.3)], tau=0.8)
    assert len(obs) == 2


def test_union_grows_observation():
    obs = build_observations([seg(1, 0, 1), seg(2, 0.1, 1.1)])
    assert obs[0].interval == TimeInterval(0, 1.1)


def test_sorted_internally_and_ids_point_at_input():
    segs = [seg(1, 5, 6), seg(2, 0, 1)]
    obs = build_observations(segs)
    assert [o.member_ids for o in obs] == [(1,), (0,)]


def test_empty_and_bad_tau():
    assert build_observations([]) == []
    with pytest.raises(ConfigError):
        build_observations([seg(1, 0, 1)], tau=0.0)


def test_accepts_records():
    obs = build_observations([{"speaker": 1, "start": 0, "end": 1}])
    assert obs[0].members[0].speaker == 1


def test_next_boundary_target():
    obs = build_observations([seg(1, 0, 1), seg(2, 2, 3)])
    assert next_boundary_target(obs, 1) == BoundaryDecision.continue_with(TimeInterval(2, 3))
    assert next_boundary_target(obs, 2).is_terminal
    with pytest.raises(IndexError):
        next_boundary_target(obs, 3)


@pytest.mark.parametrize("t, b", [(0.0, 0), (0.3, 3), (0.7, 7), (12.34, 123), (0.0999, 0), (0.1, 1)])
def test_discretize_frozen(t, b):
    assert discretize_boundary(t, 0.1) == b


def test_undiscretize_is_bin_centre():
    assert undiscretize_boundary(3, 0.1) == pytest.approx(0.35)
    with pytest.raises(RangeError):
        discretize_boundary(-0.01)
    with pytest.raises(RangeError):
        undiscretize_boundary(-1)


def test_decision_bins():
    assert BoundaryDecision.continue_with(TimeInterval(1.25, 2.5)).bins(0.1) == (12, 25)
    assert BoundaryDecision.terminate().bins() is None
    assert BoundaryDecision.terminate().kind == "terminate"


@given(st.floats(0, 10000, allow_nan=False), st.sampled_from([0.01, 0.05, 0.1, 0.25, 1.0]))
def test_bin_round_trip(t, w):
    assert abs(undiscretize_boundary(discretize_boundary(t, w), w) - t) <= w / 2 + 1e-9


intervals = st.lists(st.tuples(st.integers(1, 4), st.integers(0, 3000), st.integers(1, 600)),
                     min_size=1, max_size=25)


@given(intervals, st.sampled_from([0.5, 0.8, 1.0]))
def test_consecutive_observations_are_separated(rows, tau):
    segs = [seg(s, a / 100, (a + d) / 100) for s, a, d in rows]
    obs = build_observations(segs, tau)
    assert sorted(i for o in obs for i in o.member_ids) == list(range(len(segs)))
    for a, b in zip(obs, obs[1:]):
        assert max(overlap_ratios(a.interval, b.interval)) < tau
        assert a.interval.start <= b.interval.start


def test_observation_dump():
    obs = build_observations([seg(1, 0, 1), seg(2, 0.1, 0.9), seg(1, 2, 3)])
    rows = [json.loads(x) for x in observations_to_jsonl(obs, "s").splitlines()]
    assert rows == [
        {"session_id": "s", "index": 1, "start": 0.0, "end": 1.0, "members": [0, 1]},
        {"session_id": "s", "index": 2, "start": 2.0, "end": 3.0, "members": [2]},
    ]


def test_estimator_api():
    est = ObservationBuilder(tau=0.5)
    assert est.get_params() == {"tau": 0.5}
    assert clone(est).tau == 0.5
    segs = [seg(1, 0, 1), seg(2, 2, 3)]
    assert len(est.fit(segs).transform(segs)) == 2
    assert [d.is_terminal for d in est.targets(segs)] == [False, True]
