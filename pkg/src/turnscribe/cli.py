"""Command-line entry point: ``turnscribe <subcommand> ...``.

Subcommands: synth, prep, observe, cache-select, run, eval, segment. Exit
status is 0 on success, 1 on a runtime error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from types import SimpleNamespace

from . import __version__
from .audio import load_wav_mono, read_vad_file, segment_long_form, write_wav
from .backends import HttpBackend
from .boundary import build_observations, observations_to_jsonl
from .cache import ObservationBuffer, flatten_cache, select_cache
from .config import GlobalConfig, read_config_file
from .dataprep import emit_dataset, examples_to_jsonl
from .errors import TurnscribeError
from .metrics import aggregate_reports, der, evaluate_session
from .orchestrator import run_long_form, run_session, turn_log_records
from .synth import CorruptionConfig, OracleBackend, SynthConfig, derive_seed, generate_session
from .timeline import (
    SessionAnnotation,
    read_rttm,
    read_transcript_jsonl,
    write_annotation_jsonl,
    write_transcript_jsonl,
)

__all__ = ["main", "build_parser"]

log = logging.getLogger("turnscribe")


class UsageError(Exception):
    """Bad combination of arguments that argparse cannot catch itself."""


# -- helpers ---------------------------------------------------------------

def _config(args) -> GlobalConfig:
    """File values first, then every flag the user actually gave."""
    cfg = GlobalConfig()
    if getattr(args, "config", None):
        cfg = GlobalConfig.from_mapping(read_config_file(args.config))
    flags = {name: getattr(args, name, None) for name in cfg.to_dict()}
    return cfg.updated(**flags)


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def _emit(args, obj, table: list[list]) -> None:
    if args.json:
        sys.stdout.write(_dump(obj))
        return
    if not table:
        return
    widths = [max(len(str(row[i])) for row in table) for i in range(len(table[0]))]
    for row in table:
        print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())


def _map(args, fn, items):
    jobs = max(1, int(getattr(args, "jobs", 1) or 1))
    if jobs == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _read_annotations(path) -> dict[str, SessionAnnotation]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.jsonl"))
        if not files:
            raise FileNotFoundError(f"no .jsonl files in {p}")
    elif p.is_file():
        files = [p]
    else:
        raise FileNotFoundError(f"no such file or directory: {p}")
    out: dict[str, SessionAnnotation] = {}
    for f in files:
        for sid, ann in read_transcript_jsonl(f).items():
            if sid in out:
                raise ValueError(f"session {sid!r} appears in more than one input file")
            out[sid] = ann
    return out


def _fmt_rate(x) -> str:
    return "-" if x is None or x != x else f"{x:.4f}"


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    lo = args.speakers if args.speakers is not None else args.min_speakers
    hi = args.speakers if args.speakers is not None else args.max_speakers
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed] if args.count == 1 else [derive_seed(args.seed, i) for i in range(args.count)]

    def one(seed):
        cfg = SynthConfig(seed=seed, duration=args.duration, min_speakers=lo, max_speakers=hi,
                          overlap_prob=args.overlap, backchannel_prob=args.backchannel,
                          sample_rate=args.sample_rate)
        ann, audio = generate_session(cfg)
        write_wav(out / ann.audio_ref, audio.samples, audio.sample_rate)
        return ann

    sessions = _map(args, one, seeds)
    write_annotation_jsonl(out / "annotations.jsonl", sessions)
    rows = [{"session_id": a.session_id, "speakers": len(a.speakers), "segments": len(a.segments),
             "duration": a.duration, "audio": a.audio_ref} for a in sessions]
    _emit(args, {"out": str(out), "sessions": rows},
          [["session", "speakers", "segments", "duration", "audio"]]
          + [[r["session_id"], r["speakers"], r["segments"], f"{r['duration']:.2f}", r["audio"]] for r in rows])
    return 0


def cmd_prep(args) -> int:
    cfg = _config(args)
    sessions = _read_annotations(args.inp)
    examples = emit_dataset([sessions[s] for s in sorted(sessions)], args.stage, cfg,
                            jobs=max(1, args.jobs))
    _write_text(args.out, examples_to_jsonl(examples))
    _emit(args, {"stage": args.stage, "sessions": len(sessions), "examples": len(examples),
                 "config": cfg.to_dict()},
          [["stage", "sessions", "examples"], [args.stage, len(sessions), len(examples)]])
    return 0


def cmd_observe(args) -> int:
    cfg = _config(args)
    sessions = _read_annotations(args.inp)
    parts = [observations_to_jsonl(build_observations(sessions[s].segments, cfg.tau), s)
             for s in sorted(sessions)]
    _write_text(args.out, "".join(parts))
    return 0


def cmd_cache_select(args) -> int:
    cfg = _config(args)
    sessions = _read_annotations(args.inp)
    if args.session is not None:
        if args.session not in sessions:
            raise KeyError(f"session {args.session!r} not in {args.inp}")
        sessions = {args.session: sessions[args.session]}
    lines = []
    for sid in sorted(sessions):
        ann = sessions[sid]
        buffer = ObservationBuffer(ann.audio_ref)
        for obs in build_observations(ann.segments, cfg.tau):
            buffer.append(obs.interval, obs.members)
        chosen = select_cache(buffer, buffer.speakers(), cfg.alpha, cfg.k, before=args.before)
        for entry in flatten_cache(chosen):
            rec = {"session_id": sid}
            rec.update(entry.to_record())
            lines.append(json.dumps(rec, ensure_ascii=False) + "\n")
    _write_text(args.out, "".join(lines))
    return 0


def _backend_factory(args, truth: dict[str, SessionAnnotation] | None, cfg: GlobalConfig):
    choice = args.backend
    if choice == "oracle":
        if truth is None:
            raise UsageError("--backend oracle needs --truth")
        corruption = CorruptionConfig(args.label_swap_prob, args.timestamp_jitter,
                                      args.char_error_prob, args.speaker_count_error_prob,
                                      args.corruption_seed)
        return lambda sid: OracleBackend(truth[sid], corruption, tau=cfg.tau), corruption
    if choice.startswith(("http://", "https://")):
        url = choice
    elif choice.startswith("http:"):
        url = choice[len("http:"):]
    else:
        raise UsageError(f"--backend must be 'oracle' or 'http:URL', got {choice!r}")
    shared = HttpBackend(url, timeout=args.timeout, supports_audio_bytes=args.embed_audio)
    return lambda sid: shared, None


def _session_for(path: Path, truth: dict[str, SessionAnnotation] | None, override: str | None) -> str:
    if override is not None:
        return override
    if truth:
        for sid, ann in truth.items():
            if ann.audio_ref and Path(ann.audio_ref).name == path.name:
                return sid
    return path.stem


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.session is not None and len(args.audio) > 1:
        raise UsageError("--session names one session; pass a single --audio")
    truth = _read_annotations(args.truth) if args.truth else None
    make_backend, corruption = _backend_factory(args, truth, cfg)
    jobs = [(Path(a), _session_for(Path(a), truth, args.session)) for a in args.audio]
    if truth is not None:
        missing = [sid for _, sid in jobs if sid not in truth]
        if missing:
            raise KeyError(f"no ground truth for session(s): {', '.join(missing)}")
    vad = read_vad_file(args.vad) if args.vad else None

    def one(job):
        path, sid = job
        audio = load_wav_mono(path)
        backend = make_backend(sid)
        if args.long_form or audio.duration > cfg.window + 1e-6:
            res = run_long_form(audio, backend, cfg, vad=vad)
            logs = [row for i, r in enumerate(res.results) if r is not None
                    for row in turn_log_records(r.turns, sid, chunk=i)]
            info = {"chunks": len(res.chunks), "failures": [f.error for f in res.failures],
                    "flags": [f for r in res.results if r is not None for f in r.flags]}
            return sid, res.transcript, None, logs, info
        res = run_session(audio, backend, cfg)
        info = {"chunks": 1, "failures": [], "flags": list(res.flags)}
        return sid, res.transcript, res.summary, turn_log_records(res.turns, sid), info

    results = _map(args, one, jobs)
    if args.out:
        write_transcript_jsonl(args.out, {sid: tr for sid, tr, *_ in results})
    if args.log:
        _write_text(args.log, "".join(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n"
                                      for _, _, _, logs, _ in results for row in logs))
    if args.summary_out:
        summaries = {
            sid: {"speaker_count": s.speaker_count,
                  "gender_counts": {g.value: n for g, n in s.gender_counts.items()}}
            for sid, _, s, _, _ in results if s is not None
        }
        _write_text(args.summary_out, _dump(summaries))
    report = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "backend": args.backend,
        "corruption": None if corruption is None else asdict(corruption),
        "sessions": {sid: dict(info, segments=len(tr)) for sid, tr, _, _, info in results},
    }
    _emit(args, report, [["session", "segments", "chunks", "failures", "flags"]]
          + [[sid, len(tr), info["chunks"], len(info["failures"]), len(info["flags"])]
             for sid, tr, _, _, info in results])
    failed = sum(len(info["failures"]) for *_, info in results)
    if failed:
        print(f"error: {failed} chunk(s) failed; see the run report", file=sys.stderr)
        return 1
    return 0


def _load_summaries(path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {sid: SimpleNamespace(speaker_count=int(v["speaker_count"])) for sid, v in raw.items()}


def cmd_eval(args) -> int:
    cfg = _config(args)
    rttm = str(args.ref).endswith(".rttm") or str(args.hyp).endswith(".rttm")

    def load(path):
        if str(path).endswith(".rttm"):
            return {sid: SessionAnnotation.from_segments(sid, segs) for sid, segs in read_rttm(path).items()}
        return _read_annotations(path)

    ref, hyp = load(args.ref), load(args.hyp)
    only_ref = sorted(set(ref) - set(hyp))
    only_hyp = sorted(set(hyp) - set(ref))
    if only_ref or only_hyp:
        parts = []
        if only_ref:
            parts.append(f"missing from hypothesis: {', '.join(only_ref)}")
        if only_hyp:
            parts.append(f"missing from reference: {', '.join(only_hyp)}")
        raise KeyError("session ids differ; " + "; ".join(parts))

    ids = sorted(ref)
    if rttm:
        def score(sid):
            d = der(ref[sid].segments, hyp[sid].segments, collar=cfg.collar, step=args.step)
            return sid, {"der": d.der, "miss": d.miss, "false_alarm": d.false_alarm,
                         "confusion": d.confusion, "reference_speech": d.reference_speech,
                         "miss_time": d.miss_time, "false_alarm_time": d.false_alarm_time,
                         "confusion_time": d.confusion_time, "status": d.status}
        per = dict(_map(args, score, ids))
        speech = sum(v["reference_speech"] for v in per.values())
        err = sum(v["miss_time"] + v["false_alarm_time"] + v["confusion_time"] for v in per.values())
        aggregate = {"der": err / speech if speech else None, "reference_speech": speech}
        report = {"config": cfg.to_dict(), "seed": cfg.seed, "mode": "der-only",
                  "sessions": per, "aggregate": aggregate}
        table = [["session", "DER"]] + [[sid, _fmt_rate(per[sid]["der"])] for sid in ids]
        table.append(["ALL", _fmt_rate(aggregate["der"])])
    else:
        summaries = _load_summaries(args.summary) if args.summary else {}
        source = args.count_source or ("summary" if args.summary else "transcript")

        def score(sid):
            return sid, evaluate_session(ref[sid], hyp[sid].segments, summaries.get(sid),
                                         collar=cfg.collar, step=args.step, count_source=source)
        per = dict(_map(args, score, ids))
        agg = aggregate_reports(per)
        report = {"config": cfg.to_dict(), "seed": cfg.seed, "mode": "full", "count_source": source,
                  "sessions": {sid: per[sid].to_dict() for sid in ids}, "aggregate": agg.to_dict()}
        head = ["session", "DER", "CER", "cpCER", "dCP", "ACC", "SCA"]

        def row(name, r):
            return [name] + [_fmt_rate(x) for x in (r.der, r.cer, r.cpcer, r.delta_cp, r.acc, r.sca)]
        table = [head] + [row(sid, per[sid]) for sid in ids] + [row("ALL", agg)]
    if args.report:
        Path(args.report).write_text(_dump(report), encoding="utf-8")
    _emit(args, report, table)
    return 0


def cmd_segment(args) -> int:
    cfg = _config(args)
    audio = load_wav_mono(args.audio)
    vad = read_vad_file(args.vad) if args.vad else None
    chunks = segment_long_form(audio, vad, cfg.min_window, cfg.window)
    rows = [{"index": i, "start": round(c.start, 2), "end": round(c.end, 2)} for i, c in enumerate(chunks)]
    _emit(args, {"audio": str(args.audio), "duration": audio.duration, "chunks": rows},
          [["index", "start", "end"]] + [[r["index"], f"{r['start']:.2f}", f"{r['end']:.2f}"] for r in rows])
    return 0


# -- parser ----------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    p.add_argument("--jobs", type=int, default=1, help="sessions processed in parallel")
    p.add_argument("--config", help="key=value file; explicit flags override it")
    return p


def _add_tau(p):
    p.add_argument("--tau", type=float, help="observation merge threshold (default 0.8)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="turnscribe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="simulate sessions: WAV + annotation JSONL")
    p.add_argument("--speakers", type=int, help="fixed speaker count (overrides the range)")
    p.add_argument("--min-speakers", type=int, default=2)
    p.add_argument("--max-speakers", type=int, default=4)
    p.add_argument("--duration", type=float, default=45.0)
    p.add_argument("--overlap", type=float, default=0.2, help="probability a turn overlaps the previous")
    p.add_argument("--backchannel", type=float, default=0.1)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--seed", type=int, default=0,
                   help="session seed; with --count N, the root seed sessions are derived from")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", parents=[common], help="emit curriculum training examples")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--in", dest="inp", required=True, help="annotation JSONL file or directory")
    p.add_argument("--out", default="-")
    _add_tau(p)
    p.add_argument("--bin-width", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("observe", parents=[common], help="dump ground-truth observations")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", default="-")
    _add_tau(p)
    p.set_defaults(func=cmd_observe)

    p = sub.add_parser("cache-select", parents=[common], help="select cache entries from a transcript")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--session")
    p.add_argument("--before", type=float, help="only spans ending at or before this time")
    _add_tau(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_cache_select)

    p = sub.add_parser("run", parents=[common], help="transcribe audio through a backend")
    p.add_argument("--audio", nargs="+", required=True)
    p.add_argument("--backend", default="oracle", help="'oracle' or 'http:URL'")
    p.add_argument("--truth", help="annotation JSONL for the oracle backend")
    p.add_argument("--session", help="session id for a single --audio")
    p.add_argument("--vad", help="file of 'start end' speech regions")
    p.add_argument("--long-form", action="store_true", help="chunk with the speaker cache")
    p.add_argument("--no-cache", dest="use_cache", action="store_const", const=False)
    p.add_argument("--no-answer-turn", dest="answer_turn", action="store_const", const=False)
    p.add_argument("--strict", action="store_const", const=True, help="stop on the first failed chunk")
    _add_tau(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--window", type=float)
    p.add_argument("--min-window", type=float)
    p.add_argument("--max-turns", type=int)
    p.add_argument("--slack", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--embed-audio", action="store_true", help="send audio as base64 to the HTTP backend")
    p.add_argument("--label-swap-prob", type=float, default=0.0)
    p.add_argument("--timestamp-jitter", type=float, default=0.0)
    p.add_argument("--char-error-prob", type=float, default=0.0)
    p.add_argument("--speaker-count-error-prob", type=float, default=0.0)
    p.add_argument("--corruption-seed", type=int, default=0)
    p.add_argument("--out", help="hypothesis transcript JSONL")
    p.add_argument("--log", help="turn log JSONL")
    p.add_argument("--summary-out", help="global-turn speaker counts, JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="score a hypothesis against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float)
    p.add_argument("--step", type=float, default=0.01, help="DER frame step in seconds")
    p.add_argument("--summary", help="JSON from 'run --summary-out'")
    p.add_argument("--count-source", choices=("summary", "transcript"))
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", parents=[common], help="cut long audio into chunks")
    p.add_argument("--audio", required=True)
    p.add_argument("--vad")
    p.add_argument("--window", type=float)
    p.add_argument("--min-window", type=float)
    p.set_defaults(func=cmd_segment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (TurnscribeError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        if args.json:
            err = {"error": type(exc).__name__, "message": msg}
            if hasattr(exc, "code") and isinstance(exc.code, str):
                err["code"] = exc.code
            print(json.dumps(err, ensure_ascii=False, sort_keys=True), file=sys.stderr)
        else:
            print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
