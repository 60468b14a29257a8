"""WAV loading, time-indexed slicing and long-form chunking.

Only RIFF/WAVE with 16-bit PCM or 32-bit IEEE float payloads is read. The
first channel is kept and everything else is dropped on load.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import RangeError, WavMissingFile, WavTruncatedHeader, WavUnsupportedEncoding
from .timeline import TimeInterval
from .validation import check_interval, quantize_time

__all__ = [
    "AudioBuffer",
    "AudioSlice",
    "load_wav_mono",
    "decode_wav_mono",
    "write_wav",
    "wav_bytes",
    "slice_audio",
    "energy_vad",
    "segment_long_form",
    "read_vad_file",
]

_PCM = 0x0001
_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE
# Index tolerance so 10 ms-grid times land on exact sample indices.
_EPS = 1e-7


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int
    ref: str = ""

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError("AudioBuffer holds mono samples only")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True, eq=False)
class AudioSlice:
    """Samples of ``parent_ref`` over ``interval`` (seconds in the parent)."""

    parent_ref: str
    interval: TimeInterval
    samples: np.ndarray
    sample_rate: int

    @property
    def ref(self) -> str:
        return self.parent_ref

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def as_buffer(self) -> AudioBuffer:
        return AudioBuffer(self.samples, self.sample_rate, self.parent_ref)


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        yield cid, body, size
        pos += 8 + size + (size & 1)


def decode_wav_mono(data: bytes, ref: str = "") -> AudioBuffer:
    """Decode WAV bytes to channel 0, scaled to [-1, 1]."""
    if len(data) < 12:
        if b"RIFF".startswith(data[:4]):
            raise WavTruncatedHeader(f"{ref or 'input'}: RIFF header cut short")
        raise WavUnsupportedEncoding(f"{ref or 'input'}: not a RIFF/WAVE file")
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavUnsupportedEncoding(f"{ref or 'input'}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    for cid, body, size in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavTruncatedHeader(f"{ref or 'input'}: fmt chunk is {len(body)} bytes")
            fmt = body
        elif cid == b"data":
            payload = body
            break
    if fmt is None:
        raise WavTruncatedHeader(f"{ref or 'input'}: no fmt chunk")
    if payload is None:
        raise WavTruncatedHeader(f"{ref or 'input'}: no data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _EXTENSIBLE:
        if len(fmt) < 40:
            raise WavTruncatedHeader(f"{ref or 'input'}: extensible fmt chunk cut short")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels < 1 or rate < 1:
        raise WavUnsupportedEncoding(f"{ref or 'input'}: {channels} channels at {rate} Hz")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise WavUnsupportedEncoding(f"{ref or 'input'}: format tag {tag:#x}, {bits} bits")
    if block_align != channels * dtype.itemsize:
        raise WavUnsupportedEncoding(f"{ref or 'input'}: block_align {block_align} mismatch")

    # A short data chunk keeps every whole frame it holds.
    frames = len(payload) // block_align
    raw = np.frombuffer(payload[: frames * block_align], dtype=dtype).reshape(frames, channels)
    mono = raw[:, 0].astype(np.float32) * np.float32(scale)
    if tag == _FLOAT:
        mono = np.clip(mono, -1.0, 1.0)
    return AudioBuffer(mono, rate, ref)


def load_wav_mono(path) -> AudioBuffer:
    """Read ``path`` and keep the first microphone channel.

    Raises:
        WavMissingFile: ``path`` does not exist.
        WavUnsupportedEncoding: not RIFF/WAVE, or neither PCM16 nor float32.
        WavTruncatedHeader: header or mandatory chunks cut short.
    """
    p = Path(path)
    if not p.is_file():
        raise WavMissingFile(f"no such WAV file: {p}")
    return decode_wav_mono(p.read_bytes(), str(p))


def wav_bytes(samples, sample_rate: int, *, float32: bool = False) -> bytes:
    """Encode ``samples`` (shape ``(n,)`` or ``(n, channels)``) as a WAV file."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    channels = arr.shape[1]
    if float32:
        tag, bits = _FLOAT, 32
        body = arr.astype("<f4").tobytes()
    else:
        tag, bits = _PCM, 16
        body = np.clip(np.round(arr * 32767.0), -32768, 32767).astype("<i2").tobytes()
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    out = io.BytesIO()
    out.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)) + b"WAVE")
    out.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
    out.write(b"data" + struct.pack("<I", len(body)) + body)
    return out.getvalue()


def write_wav(path, samples, sample_rate: int, *, float32: bool = False) -> None:
    Path(path).write_bytes(wav_bytes(samples, sample_rate, float32=float32))


def _index(t: float, rate: int) -> int:
    return math.floor(t * rate + _EPS)


def slice_audio(buf: AudioBuffer | AudioSlice, iv) -> AudioSlice:
    """Samples ``[floor(start * rate), floor(end * rate))`` of ``buf``.

    ``iv`` is in the time base of ``buf``; slicing an ``AudioSlice`` is
    relative to the slice's own origin.

    Raises:
        RangeError: ``iv`` has no duration or extends past the buffer.
    """
    iv = check_interval(iv)
    rate = buf.sample_rate
    dur = len(buf.samples) / rate
    if iv.end > dur + 0.5 / rate:
        raise RangeError(f"interval [{iv.start}, {iv.end}] exceeds buffer duration {dur}")
    lo = _index(iv.start, rate)
    hi = min(_index(iv.end, rate), len(buf.samples))
    if isinstance(buf, AudioSlice):
        parent_iv = iv.shift(buf.interval.start)
    else:
        parent_iv = iv
    return AudioSlice(buf.ref, parent_iv, buf.samples[lo:hi], rate)


def energy_vad(buf: AudioBuffer, *, frame: float = 0.025, hop: float = 0.010,
               ratio: float = 0.5, hangover: float = 0.300) -> list[TimeInterval]:
    """Speech regions from short-time energy.

    A frame is speech when its mean power exceeds ``ratio`` times the median
    frame power; speech is held for ``hangover`` seconds after the last
    active frame.
    """
    x = np.asarray(buf.samples, dtype=np.float64)
    rate = buf.sample_rate
    win, step = max(1, round(frame * rate)), max(1, round(hop * rate))
    if len(x) < win:
        return []
    n = 1 + (len(x) - win) // step
    csum = np.concatenate(([0.0], np.cumsum(x * x)))
    starts = np.arange(n) * step
    power = (csum[starts + win] - csum[starts]) / win
    active = power > ratio * np.median(power)
    hold = int(round(hangover / hop))
    regions: list[TimeInterval] = []
    start = None
    last = -1
    for j in range(n):
        if active[j]:
            if start is None:
                start = j
            last = j
        elif start is not None and j - last > hold:
            regions.append((start, last))
            start = None
    if start is not None:
        regions.append((start, last))
    dur = buf.duration
    out = []
    for a, b in regions:
        t0 = a * hop
        t1 = min(dur, b * hop + frame + hangover)
        if t1 > t0:
            out.append(TimeInterval(t0, t1))
    return out


def read_vad_file(path) -> list[TimeInterval]:
    """One ``start end`` pair per line, in seconds; ``#`` starts a comment."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                a, b = (float(v) for v in line.split())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected 'start end'") from exc
            out.append(TimeInterval(a, b))
    return out


def segment_long_form(buf: AudioBuffer | float, vad: Sequence[TimeInterval] | None = None,
                      min_len: float = 40.0, max_len: float = 50.0) -> list[TimeInterval]:
    """Cut ``[0, T]`` into consecutive chunks no longer than ``max_len``.

    Each cut is the latest VAD boundary (speech start or end) lying in
    ``[prev + min_len, prev + max_len]``; with none available the cut is
    forced at ``prev + max_len`` and may bisect speech. ``vad=None`` runs
    :func:`energy_vad`; an empty list means "no boundaries".

    Cut points are snapped to the 10 ms grid. ``buf`` may also be a bare
    duration in seconds when ``vad`` is given.
    """
    if not 0 < min_len < max_len:
        raise ValueError(f"need 0 < min_len < max_len, got {min_len}, {max_len}")
    if isinstance(buf, (int, float)):
        T = float(buf)
        if vad is None:
            raise ValueError("a bare duration needs explicit VAD boundaries")
    else:
        T = buf.duration
        if vad is None:
            vad = energy_vad(buf)
    if T <= 0:
        return []
    points = sorted({t for iv in vad for t in (iv.start, iv.end) if 0 < t < T})
    cuts = [0.0]
    while T - cuts[-1] > max_len:
        prev = cuts[-1]
        lo, hi = prev + min_len, prev + max_len
        inside = [t for t in points if lo - 1e-9 <= t <= hi + 1e-9]
        cuts.append(quantize_time(inside[-1]) if inside else quantize_time(hi))
    cuts.append(T)
    return [TimeInterval(a, b) for a, b in zip(cuts, cuts[1:])]
