"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TurnscribeError(Exception):
    """Base class for every error raised by this package."""


class RangeError(TurnscribeError, ValueError):
    """A time value or interval falls outside its permitted range."""


class EmptySession(TurnscribeError, ValueError):
    pass


class WavError(TurnscribeError):
    """Base class for WAV decoding failures. ``code`` is stable for scripting."""

    code = "wav_error"


class WavMissingFile(WavError, FileNotFoundError):
    code = "missing_file"


class WavUnsupportedEncoding(WavError):
    code = "unsupported_encoding"


class WavTruncatedHeader(WavError):
    code = "truncated_header"


class DegenerateBuffer(TurnscribeError, ValueError):
    pass


class NoHistory(TurnscribeError):
    """No speech lies before the requested cut point."""


class UnparseableTurn(TurnscribeError, ValueError):
    pass


class ProtocolViolation(TurnscribeError):
    """The backend broke the interaction protocol.

    Attributes:
        partial: Transcript consolidated from the turns completed before the
            violation.
        turns: The turn log up to and including the offending turn.
    """

    def __init__(self, message, partial=(), turns=()):
        super().__init__(message)
        self.partial = list(partial)
        self.turns = list(turns)


class BackendError(TurnscribeError):
    """A backend ``generate`` call failed; ``turn_index`` names the turn."""

    def __init__(self, message, turn_index):
        super().__init__(f"turn {turn_index}: {message}")
        self.turn_index = turn_index


class ConfigError(TurnscribeError, ValueError):
    pass


class OracleRangeError(TurnscribeError, ValueError):
    pass


class UndefinedMetric(TurnscribeError, ValueError):
    """The metric has no defined value for this input (empty reference)."""


class InvalidSession(TurnscribeError, ValueError):
    """An annotation failed validation; ``violations`` lists every problem."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)
