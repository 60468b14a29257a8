"""Run-wide parameters and the ``key=value`` config file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .boundary import DEFAULT_BIN_WIDTH, DEFAULT_TAU
from .cache import DEFAULT_ALPHA, DEFAULT_K
from .errors import ConfigError
from .validation import check_positive, check_tau

__all__ = ["GlobalConfig", "read_config_file"]


@dataclass(frozen=True)
class GlobalConfig:
    """Every tunable of a run. Embedded verbatim in reports.

    ``window`` / ``min_window`` bound long-form chunk length; ``slack`` is
    how far a segment may stray outside its observation before it is
    flagged; ``answer_turn`` asks the backend for a consolidated
    ``<answer>`` after the last observation.
    """

    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA
    k: int = DEFAULT_K
    bin_width: float = DEFAULT_BIN_WIDTH
    collar: float = 0.0
    window: float = 50.0
    min_window: float = 40.0
    max_turns: int = 64
    slack: float = 0.5
    seed: int = 0
    use_cache: bool = True
    answer_turn: bool = True
    strict: bool = False

    def __post_init__(self):
        check_tau(self.tau)
        check_positive("alpha", self.alpha, strict=False)
        check_positive("bin_width", self.bin_width)
        check_positive("collar", self.collar, strict=False)
        check_positive("slack", self.slack, strict=False)
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if int(self.max_turns) != self.max_turns or self.max_turns < 2:
            raise ConfigError(f"max_turns must be an integer >= 2, got {self.max_turns}")
        if not 0 < self.min_window < self.window:
            raise ConfigError(f"need 0 < min_window < window, got {self.min_window}, {self.window}")

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **changes) -> "GlobalConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def from_mapping(cls, values: dict) -> "GlobalConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(cls.__dataclass_fields__[name].default, raw, key)
        return cls(**kwargs)


def _coerce(default, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` comments and blank lines ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value.strip('"').strip("'")
    return out
