"""Observation construction from speaker segments and boundary targets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .errors import RangeError
from .timeline import Segment, TimeInterval
from .validation import check_positive, check_segments, check_tau

__all__ = [
    "DEFAULT_TAU",
    "DEFAULT_BIN_WIDTH",
    "Observation",
    "BoundaryDecision",
    "overlap_ratios",
    "build_observations",
    "next_boundary_target",
    "discretize_boundary",
    "undiscretize_boundary",
    "observation_records",
    "observations_to_jsonl",
    "ObservationBuilder",
]

DEFAULT_TAU = 0.8
DEFAULT_BIN_WIDTH = 0.1
# Keeps floor(0.3 / 0.1) at 3 rather than 2.
_BIN_EPS = 1e-9
# An overlap of exactly tau on the 10 ms grid must not miss by float error.
_RATIO_EPS = 1e-9


@dataclass(frozen=True, slots=True)
class Observation:
    """A contiguous slice of the session and the segments it covers.

    ``member_ids`` index into the segment list the observation was built
    from.
    """

    index: int
    interval: TimeInterval
    members: tuple[Segment, ...]
    member_ids: tuple[int, ...] = ()


@dataclass(frozen=True, slots=True)
class BoundaryDecision:
    """Either the next observation interval or the end of the session."""

    next_interval: TimeInterval | None = None

    @classmethod
    def terminate(cls) -> "BoundaryDecision":
        return cls(None)

    @classmethod
    def continue_with(cls, iv: TimeInterval) -> "BoundaryDecision":
        return cls(iv)

    @property
    def is_terminal(self) -> bool:
        return self.next_interval is None

    @property
    def kind(self) -> str:
        return "terminate" if self.next_interval is None else "continue"

    def bins(self, bin_width: float = DEFAULT_BIN_WIDTH) -> tuple[int, int] | None:
        if self.next_interval is None:
            return None
        return (discretize_boundary(self.next_interval.start, bin_width),
                discretize_boundary(self.next_interval.end, bin_width))


def overlap_ratios(a: TimeInterval, b: TimeInterval) -> tuple[float, float]:
    """Intersection duration as a fraction of each interval's duration."""
    d_ab = a.intersection(b)
    return d_ab / a.duration, d_ab / b.duration


def build_observations(segments: Sequence[Segment], tau: float = DEFAULT_TAU) -> list[Observation]:
    """Group start-ordered segments into observations.

    Greedy single pass: a segment joins the current observation when either
    overlap ratio against the observation's running interval reaches
    ``tau``; otherwise it opens the next observation. Consecutive
    observations therefore overlap by less than ``tau`` on both sides.
    """
    tau = check_tau(tau)
    segments = check_segments(segments)
    if not segments:
        return []
    order = sorted(range(len(segments)), key=lambda j: segments[j].sort_key())
    groups: list[tuple[TimeInterval, list[int]]] = []
    for j in order:
        iv = segments[j].interval
        if groups:
            cur, ids = groups[-1]
            if max(overlap_ratios(iv, cur)) >= tau - _RATIO_EPS:
                groups[-1] = (cur.union(iv), ids + [j])
                continue
        groups.append((iv, [j]))
    return [
        Observation(n, cur, tuple(segments[j] for j in ids), tuple(ids))
        for n, (cur, ids) in enumerate(groups, 1)
    ]


def next_boundary_target(observations: Sequence[Observation], i: int) -> BoundaryDecision:
    """Decision after observation ``i`` (1-based): the next interval, or stop."""
    n = len(observations)
    if not 1 <= i <= n:
        raise IndexError(f"observation index {i} outside 1..{n}")
    if i == n:
        return BoundaryDecision.terminate()
    return BoundaryDecision.continue_with(observations[i].interval)


def discretize_boundary(t: float, bin_width: float = DEFAULT_BIN_WIDTH) -> int:
    if t < 0:
        raise RangeError(f"boundary time {t} is negative")
    check_positive("bin_width", bin_width)
    return math.floor(t / bin_width + _BIN_EPS)


def undiscretize_boundary(b: int, bin_width: float = DEFAULT_BIN_WIDTH) -> float:
    """Centre of bin ``b`` in seconds."""
    if b < 0:
        raise RangeError(f"bin index {b} is negative")
    return (b + 0.5) * bin_width


def observation_records(observations: Sequence[Observation], session_id: str | None = None) -> list[dict]:
    """Rows of the observation dump: index, start, end, member segment ids."""
    rows = []
    for o in observations:
        row = {} if session_id is None else {"session_id": session_id}
        row.update(index=o.index, start=round(o.interval.start, 2),
                   end=round(o.interval.end, 2), members=list(o.member_ids))
        rows.append(row)
    return rows


def observations_to_jsonl(observations: Sequence[Observation], session_id: str | None = None) -> str:
    return "".join(json.dumps(r) + "\n" for r in observation_records(observations, session_id))


class ObservationBuilder(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`build_observations`.

    Stateless: ``fit`` only validates ``tau``. ``transform`` maps one
    segment list to its observations, so the builder drops into pipelines
    that expect the fit/transform contract.
    """

    def __init__(self, tau: float = DEFAULT_TAU):
        self.tau = tau

    def fit(self, X=None, y=None):
        self.tau_ = check_tau(self.tau)
        return self

    def transform(self, X) -> list[Observation]:
        return build_observations(X, getattr(self, "tau_", self.tau))

    def targets(self, X) -> list[BoundaryDecision]:
        """Boundary supervision for every observation of ``X``."""
        obs = self.transform(X)
        return [next_boundary_target(obs, o.index) for o in obs]
