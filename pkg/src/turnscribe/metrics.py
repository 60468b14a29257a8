"""Evaluation: CER, DER, cpCER, the cpCER-CER gap, gender accuracy and
speaker-count accuracy.

CER is computed on a speaker-agnostic stream: every segment's text in start
order. cpCER concatenates each speaker's text and scores it under the
speaker assignment that minimises total edits, padding the smaller side
with empty speakers. Both normalise text first (NFKC, no whitespace, no
punctuation) and count characters.
"""

from __future__ import annotations

import math
import unicodedata
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .timeline import Gender, Segment, SessionAnnotation, sort_segments

__all__ = [
    "normalize_text",
    "edit_distance",
    "EditCounts",
    "cer",
    "stream_text",
    "speaker_streams",
    "DerResult",
    "der",
    "CpResult",
    "cpcer",
    "AttributeResult",
    "attribute_metrics",
    "MetricsReport",
    "evaluate_session",
    "aggregate_reports",
]


def normalize_text(text: str) -> str:
    """NFKC-fold, then drop whitespace and punctuation."""
    folded = unicodedata.normalize("NFKC", text)
    return "".join(
        ch for ch in folded
        if not ch.isspace() and not unicodedata.category(ch).startswith("P")
    )


def _codes(s: str) -> np.ndarray:
    return np.fromiter(map(ord, s), dtype=np.int64, count=len(s))


def edit_distance(a: str, b: str) -> int:
    """Unit-cost Levenshtein distance, one numpy row at a time.

    Insertions within a row resolve through a running minimum of
    ``row[j] - j``.
    """
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    ca, cb = _codes(a), _codes(b)
    n = len(cb)
    j = np.arange(n + 1, dtype=np.int64)
    prev = j.copy()
    cur = np.empty(n + 1, dtype=np.int64)
    for i, ch in enumerate(ca, 1):
        cur[0] = i
        np.minimum(prev[:-1] + (cb != ch), prev[1:] + 1, out=cur[1:])
        cur -= j
        np.minimum.accumulate(cur, out=cur)
        cur += j
        prev, cur = cur, prev
    return int(prev[n])


@dataclass(frozen=True)
class EditCounts:
    """Substitutions, insertions and deletions against ``reference_length``.

    ``degenerate`` marks an empty reference; the rate is then taken
    against a length of 1.
    """

    substitutions: int
    insertions: int
    deletions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def degenerate(self) -> bool:
        return self.reference_length == 0

    @property
    def rate(self) -> float:
        return self.errors / max(self.reference_length, 1)


def _align_counts(ref: str, hyp: str) -> EditCounts:
    m, n = len(ref), len(hyp)
    if m == 0 or n == 0:
        return EditCounts(0, n, m, m)
    cr, ch = _codes(ref), _codes(hyp)
    D = np.empty((m + 1, n + 1), dtype=np.int64)
    j = np.arange(n + 1, dtype=np.int64)
    D[0] = j
    for i in range(1, m + 1):
        row = D[i]
        row[0] = i
        np.minimum(D[i - 1, :-1] + (ch != cr[i - 1]), D[i - 1, 1:] + 1, out=row[1:])
        row -= j
        np.minimum.accumulate(row, out=row)
        row += j
    s = ins = dels = 0
    i, k = m, n
    while i > 0 or k > 0:
        if i > 0 and k > 0 and D[i, k] == D[i - 1, k - 1] + (cr[i - 1] != ch[k - 1]):
            s += int(cr[i - 1] != ch[k - 1])
            i, k = i - 1, k - 1
        elif i > 0 and D[i, k] == D[i - 1, k] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            k -= 1
    return EditCounts(s, ins, dels, m)


def cer(ref: str, hyp: str, *, normalize: bool = True) -> EditCounts:
    """Character edit counts of ``hyp`` against ``ref``."""
    if normalize:
        ref, hyp = normalize_text(ref), normalize_text(hyp)
    return _align_counts(ref, hyp)


def stream_text(segments: Sequence[Segment]) -> str:
    """All text in start order, speakers ignored."""
    return "".join(normalize_text(s.text) for s in sort_segments(segments))


def speaker_streams(segments: Sequence[Segment]) -> dict[int, str]:
    """Each speaker's text concatenated in start order."""
    out: dict[int, list[str]] = {}
    for s in sort_segments(segments):
        out.setdefault(s.speaker, []).append(normalize_text(s.text))
    return {spk: "".join(parts) for spk, parts in sorted(out.items())}


# -- DER -------------------------------------------------------------------

@dataclass(frozen=True)
class DerResult:
    """Frame-scored diarization error. Times are in seconds; rates are
    fractions of ``reference_speech``."""

    miss_time: float
    false_alarm_time: float
    confusion_time: float
    reference_speech: float
    mapping: dict[int, int]
    status: str = "ok"

    def _rate(self, x: float) -> float:
        return x / self.reference_speech if self.reference_speech > 0 else math.nan

    @property
    def miss(self) -> float:
        return self._rate(self.miss_time)

    @property
    def false_alarm(self) -> float:
        return self._rate(self.false_alarm_time)

    @property
    def confusion(self) -> float:
        return self._rate(self.confusion_time)

    @property
    def der(self) -> float:
        return self._rate(self.miss_time + self.false_alarm_time + self.confusion_time)


def _activity(segments, speakers, n_frames, step):
    index = {s: i for i, s in enumerate(speakers)}
    act = np.zeros((len(speakers), n_frames), dtype=bool)
    for seg in segments:
        lo, hi = round(seg.start / step), round(seg.end / step)
        act[index[seg.speaker], lo:hi] = True
    return act


def der(ref: Sequence[Segment], hyp: Sequence[Segment], collar: float = 0.0,
        step: float = 0.01) -> DerResult:
    """Diarization error over frames of ``step`` seconds.

    Reference and hypothesis speakers are paired to maximise jointly
    active time. Frames within ``collar`` of any reference segment edge are
    not scored. An input with no scored reference speech gets status
    ``"no_reference_speech"`` and NaN rates.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if collar < 0:
        raise ValueError(f"collar must be non-negative, got {collar}")
    end = max([s.end for s in ref] + [s.end for s in hyp] + [0.0])
    n = round(end / step) + 1
    rs = sorted({s.speaker for s in ref})
    hs = sorted({s.speaker for s in hyp})
    R = _activity(ref, rs, n, step)
    H = _activity(hyp, hs, n, step)
    scored = np.ones(n, dtype=bool)
    if collar > 0:
        for s in ref:
            for edge in (s.start, s.end):
                scored[max(0, round((edge - collar) / step)): round((edge + collar) / step)] = False
    R, H = R[:, scored], H[:, scored]
    n_ref, n_hyp = R.sum(axis=0), H.sum(axis=0)
    total = int(n_ref.sum())
    mapping: dict[int, int] = {}
    correct = np.zeros(R.shape[1], dtype=np.int64)
    if rs and hs:
        overlap = R.astype(np.int64) @ H.T.astype(np.int64)
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        for r, h in zip(rows, cols):
            mapping[rs[r]] = hs[h]
            correct += R[r] & H[h]
    miss = np.maximum(n_ref - n_hyp, 0).sum()
    fa = np.maximum(n_hyp - n_ref, 0).sum()
    conf = (np.minimum(n_ref, n_hyp) - correct).sum()
    status = "ok" if total > 0 else "no_reference_speech"
    return DerResult(float(miss) * step, float(fa) * step, float(conf) * step,
                     total * step, mapping, status)


# -- cpCER -----------------------------------------------------------------

@dataclass(frozen=True)
class CpResult:
    """cpCER outcome. ``permutation`` maps each reference speaker to its
    hypothesis speaker, or ``None`` when paired with an empty pad."""

    errors: int
    reference_length: int
    permutation: dict[int, int | None]
    status: str = "ok"

    @property
    def rate(self) -> float:
        return self.errors / self.reference_length if self.reference_length else math.nan


def _segments_of(x) -> Sequence[Segment]:
    return x.segments if isinstance(x, SessionAnnotation) else x


def cpcer(ref, hyp) -> CpResult:
    """Concatenated minimum-permutation character error.

    ``ref`` is a ``SessionAnnotation`` or a segment list; ``hyp`` a segment
    list. An empty reference text gives status ``"empty_reference"``.
    """
    ref_streams = speaker_streams(_segments_of(ref))
    hyp_streams = speaker_streams(_segments_of(hyp))
    rs, hs = list(ref_streams), list(hyp_streams)
    size = max(len(rs), len(hs))
    ref_text = [ref_streams[s] for s in rs] + [""] * (size - len(rs))
    hyp_text = [hyp_streams[s] for s in hs] + [""] * (size - len(hs))
    total = sum(len(t) for t in ref_text)
    if size == 0:
        return CpResult(0, 0, {}, "empty_reference")
    cost = np.array([[edit_distance(r, h) for h in hyp_text] for r in ref_text], dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    errors = int(cost[rows, cols].sum())
    perm = {rs[r]: (hs[c] if c < len(hs) else None) for r, c in zip(rows, cols) if r < len(rs)}
    return CpResult(errors, total, perm, "ok" if total else "empty_reference")


# -- speaker attributes ----------------------------------------------------

@dataclass(frozen=True)
class AttributeResult:
    gender_correct: int
    gender_total: int
    predicted_count: int
    true_count: int
    flags: tuple[str, ...] = ()

    @property
    def acc(self) -> float:
        return self.gender_correct / self.gender_total if self.gender_total else math.nan

    @property
    def sca(self) -> float:
        return float(self.predicted_count == self.true_count)


def _speaker_genders(segments: Sequence[Segment]) -> dict[int, Gender]:
    votes: dict[int, dict[Gender, int]] = {}
    for s in segments:
        v = votes.setdefault(s.speaker, {})
        if s.gender is not Gender.UNKNOWN:
            v[s.gender] = v.get(s.gender, 0) + 1
    out = {}
    for spk, v in votes.items():
        # Majority vote; ties resolve male before female for determinism.
        out[spk] = max(v, key=lambda g: (v[g], g is Gender.MALE)) if v else Gender.UNKNOWN
    return out


def attribute_metrics(ref: SessionAnnotation, hyp: Sequence[Segment], summary=None, *,
                      count_source: str = "summary",
                      permutation: Mapping[int, int | None] | None = None) -> AttributeResult:
    """Gender accuracy over true speakers and speaker-count agreement.

    True speakers are aligned to hypothesis speakers with the cpCER
    permutation. A true speaker is right when its aligned hypothesis
    speaker carries the same, known gender; unaligned speakers and missing
    predictions count wrong. Speakers whose true gender is unknown are not
    scored.

    Args:
        summary: A global-summary ``TurnOutput`` (or anything with
            ``speaker_count``), used when ``count_source="summary"``.
        count_source: ``"summary"`` or ``"transcript"`` (distinct labels).
    """
    if count_source not in ("summary", "transcript"):
        raise ValueError(f"count_source must be 'summary' or 'transcript', got {count_source!r}")
    flags = []
    true_speakers = sorted({s.speaker for s in ref.segments})
    if count_source == "summary" and summary is not None and summary.speaker_count is not None:
        predicted = int(summary.speaker_count)
    else:
        if count_source == "summary":
            flags.append("no summary; speaker count taken from the transcript")
        predicted = len({s.speaker for s in hyp})
    if permutation is None:
        permutation = cpcer(ref, hyp).permutation
    hyp_genders = _speaker_genders(hyp)
    correct = total = 0
    for spk in true_speakers:
        truth = ref.speaker_genders.get(spk, Gender.UNKNOWN)
        if truth is Gender.UNKNOWN:
            continue
        total += 1
        h = permutation.get(spk)
        guess = hyp_genders.get(h, Gender.UNKNOWN) if h is not None else Gender.UNKNOWN
        if guess is Gender.UNKNOWN:
            flags.append(f"speaker {spk}: no gender prediction")
        elif guess is truth:
            correct += 1
    return AttributeResult(correct, total, predicted, len(true_speakers), tuple(flags))


# -- reports ---------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-session or pooled metrics.

    Rates are derived from the stored counts, so pooled reports weight
    sessions by reference speech time / characters / speakers. SCA pools
    as the fraction of sessions with the right count.
    """

    der: float
    miss: float
    false_alarm: float
    confusion: float
    cer: float
    cpcer: float
    delta_cp: float
    acc: float
    sca: float
    permutation: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    status: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts: dict, permutation=None, status=None, flags=None) -> "MetricsReport":
        c = counts

        def rate(num, den):
            return num / den if den else math.nan

        der_ = rate(c["miss_time"] + c["false_alarm_time"] + c["confusion_time"], c["reference_speech"])
        cer_ = rate(c["cer_errors"], c["cer_reference_length"])
        cp_ = rate(c["cp_errors"], c["cp_reference_length"])
        return cls(
            der=der_,
            miss=rate(c["miss_time"], c["reference_speech"]),
            false_alarm=rate(c["false_alarm_time"], c["reference_speech"]),
            confusion=rate(c["confusion_time"], c["reference_speech"]),
            cer=cer_,
            cpcer=cp_,
            delta_cp=cp_ - cer_,
            acc=rate(c["gender_correct"], c["gender_total"]),
            sca=rate(c["sca_hits"], c["sessions"]),
            permutation=dict(permutation or {}),
            counts=dict(c),
            status=dict(status or {}),
            flags=list(flags or []),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["permutation"] = {str(k): v for k, v in self.permutation.items()}
        for key in ("der", "miss", "false_alarm", "confusion", "cer", "cpcer", "delta_cp", "acc", "sca"):
            if isinstance(d[key], float) and math.isnan(d[key]):
                d[key] = None
        return d


def evaluate_session(ref: SessionAnnotation, hyp: Sequence[Segment], summary=None, *,
                     collar: float = 0.0, step: float = 0.01,
                     count_source: str = "summary") -> MetricsReport:
    d = der(ref.segments, hyp, collar=collar, step=step)
    c = cer(stream_text(ref.segments), stream_text(hyp), normalize=False)
    cp = cpcer(ref, hyp)
    attr = attribute_metrics(ref, hyp, summary, count_source=count_source, permutation=cp.permutation)
    counts = {
        "sessions": 1,
        "miss_time": d.miss_time,
        "false_alarm_time": d.false_alarm_time,
        "confusion_time": d.confusion_time,
        "reference_speech": d.reference_speech,
        "cer_errors": c.errors,
        "cer_substitutions": c.substitutions,
        "cer_insertions": c.insertions,
        "cer_deletions": c.deletions,
        "cer_reference_length": c.reference_length,
        "cp_errors": cp.errors,
        "cp_reference_length": cp.reference_length,
        "gender_correct": attr.gender_correct,
        "gender_total": attr.gender_total,
        "sca_hits": int(attr.sca),
        "predicted_speakers": attr.predicted_count,
        "true_speakers": attr.true_count,
    }
    status = {"der": d.status, "cpcer": cp.status, "cer": "degenerate" if c.degenerate else "ok"}
    return MetricsReport.from_counts(counts, cp.permutation, status, list(attr.flags))


_SUMMED = ("sessions", "miss_time", "false_alarm_time", "confusion_time", "reference_speech",
           "cer_errors", "cer_substitutions", "cer_insertions", "cer_deletions",
           "cer_reference_length", "cp_errors", "cp_reference_length", "gender_correct",
           "gender_total", "sca_hits", "predicted_speakers", "true_speakers")


def aggregate_reports(reports: Mapping[str, MetricsReport]) -> MetricsReport:
    """Pool session counts, reducing in sorted session-id order."""
    total = {k: 0 for k in _SUMMED}
    for sid in sorted(reports):
        for k in _SUMMED:
            total[k] += reports[sid].counts[k]
    return MetricsReport.from_counts(total)
