"""Input coercion and parameter checks used by the public entry points.

These mirror the ``check_*`` helpers of scikit-learn: accept loosely typed
input, return the canonical type, raise early with a readable message.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from decimal import ROUND_HALF_UP, Decimal

from .errors import ConfigError, RangeError

TIME_QUANTUM = Decimal("0.01")


def quantize_time(t: float) -> float:
    """Round seconds to the 10 ms grid, half up.

    Goes through the decimal repr so 1.005 rounds to 1.01 rather than
    falling victim to its binary expansion.
    """
    if not math.isfinite(t):
        raise RangeError(f"non-finite time {t!r}")
    return float(Decimal(repr(float(t))).quantize(TIME_QUANTUM, rounding=ROUND_HALF_UP))


def check_probability(name: str, p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_positive(name: str, x: float, *, strict: bool = True) -> float:
    x = float(x)
    if not math.isfinite(x) or x < 0 or (strict and x == 0):
        bound = "> 0" if strict else ">= 0"
        raise ConfigError(f"{name} must be {bound}, got {x}")
    return x


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    return tau


def check_segments(segments) -> list:
    """Coerce an iterable of segments or JSON-like records to ``Segment``s."""
    from .timeline import Segment

    if isinstance(segments, Segment):
        raise TypeError("expected a sequence of segments, got a single Segment")
    out = []
    for item in segments:
        if isinstance(item, Segment):
            out.append(item)
        elif isinstance(item, Mapping):
            out.append(Segment.from_record(item))
        else:
            raise TypeError(f"cannot interpret {type(item).__name__} as a Segment")
    return out


def check_interval(iv):
    """Accept a ``TimeInterval`` or a ``(start, end)`` pair."""
    from .timeline import TimeInterval

    if isinstance(iv, TimeInterval):
        return iv
    if isinstance(iv, Iterable):
        start, end = iv
        return TimeInterval(float(start), float(end))
    raise TypeError(f"cannot interpret {type(iv).__name__} as a TimeInterval")
