"""Command-line entry point: index, run, audit, score, calibrate.

Exit codes: 0 success, 1 some episodes failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .backend import BackendFactory, BackendProfile, Transcript, load_profile
from .batch import IndexCache, run_batch
from .calibration import calibration_probe, calibration_table, render_calibration
from .clipindex import build_index, index_path, load_captions
from .diagnostics import DEFAULT_GAMMA, aggregate, evaluate, policy_stats, report
from .errors import InspectGateError, NoDisjointClip
from .protocol import Mode
from .reward import RewardConfig, score_batch
from .timeline import VideoMeta
from .trajectory import EngineConfig, load_dataset, load_trajectories

log = logging.getLogger("inspectgate")

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Raised inside commands for anything that should exit with status 2."""


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError(f"config {path} must be a JSON object")
    return data


def _profile(flag_value: str | None, config: dict, role: str, base: Path | None) -> BackendProfile | None:
    """Flag beats config section; config entries may be inline objects or profile paths."""
    if flag_value:
        return load_profile(flag_value)
    entry = config.get("profiles", {}).get(role)
    if entry is None:
        return None
    if isinstance(entry, str):
        p = Path(entry)
        if base is not None and entry != "stub" and not entry.startswith("stub:") and not p.is_absolute():
            p = base / p
        return load_profile(p if not entry.startswith("stub") else entry)
    return BackendProfile.from_dict(entry)


def _write(text: str, out: str | None, name: str | None = None) -> None:
    if out:
        path = Path(out)
        if name is not None:
            path.mkdir(parents=True, exist_ok=True)
            path = path / name
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --- commands --------------------------------------------------------------------------


def cmd_index(args) -> int:
    try:
        meta = json.loads(Path(args.video_meta).read_text(encoding="utf-8"))
        video = VideoMeta(meta["video_id"], meta["duration_s"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad video meta {args.video_meta}: {exc}") from exc
    captions = load_captions(args.captions)
    profile = load_profile(args.embedder_profile)
    embedder = BackendFactory({"embedder": profile}).embedder()
    out = index_path(args.out, video.video_id)
    out.parent.mkdir(parents=True, exist_ok=True)
    index = build_index(video, captions, embedder, args.clip_len, out=out)
    print(f"{video.video_id}: {len(index.records)} clips, dimension {index.dimension} -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    config_doc = _read_config(args.config)
    base = Path(args.config).parent if args.config else None
    engine = dict(config_doc.get("engine", {}))
    for key, value in (("mode", args.mode), ("budget", args.budget), ("k_retrieve", args.topk)):
        if value is not None:
            engine[key] = value
    try:
        config = EngineConfig.from_dict(engine)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad engine config: {exc}") from exc
    profiles = {}
    for role in ("planner", "inspector", "filter", "embedder", "judge"):
        p = _profile(getattr(args, f"{role}_profile", None), config_doc, role, base)
        if p is not None:
            profiles[role] = p
    parallel = args.parallel or int(config_doc.get("parallel", 1))
    questions = load_dataset(args.dataset)
    out = Path(args.out)
    transcript = Transcript(out / "transcript.jsonl") if any(p.kind == "http" for p in profiles.values()) else None
    factory = BackendFactory(profiles, transcript)
    missing = [r for r in ("planner", "inspector", "filter") if r not in profiles]
    if missing:
        raise InputError(f"missing backend profiles: {', '.join(missing)}")
    result = run_batch(questions, config, factory, args.index_dir, out, parallel, args.resume, args.dataset)
    n = len(result.trajectories)
    answered = sum(1 for t in result.trajectories if t.outcome.is_answered)
    print(
        f"{n} trajectories ({result.skipped} resumed), {answered} answered, "
        f"{result.n_failed} failed -> {out / 'trajectories.jsonl'}"
    )
    return EXIT_PARTIAL if result.n_failed else EXIT_OK


def _join(trajectories, questions):
    by_id = {q.question_id: q for q in questions}
    unknown = [t.question_id for t in trajectories if t.question_id not in by_id]
    if unknown:
        raise InputError(f"trajectories reference unknown question ids: {', '.join(unknown[:5])}")
    return by_id


def cmd_audit(args) -> int:
    trajectories = load_trajectories(args.trajectories)
    questions = _join(trajectories, load_dataset(args.dataset))
    judge = None
    if args.judge_profile:
        factory = BackendFactory({"judge": load_profile(args.judge_profile)})
        judge = factory.chat_for
    records = []
    for t in trajectories:
        backend = judge("judge", t.question_id) if judge else None
        records.append(evaluate(t, questions[t.question_id], args.gamma, backend, not args.inspected_only))
    metrics = aggregate(records, args.gamma)
    golds = {qid: q.evidence for qid, q in questions.items()}
    stats = policy_stats(trajectories, golds, args.gamma, not args.inspected_only)
    text = report(metrics, stats, args.report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in records]
        (out / "records.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    suffix = "txt" if args.report == "table" else args.report
    _write(text, args.out, f"audit.{suffix}" if args.out else None)
    return EXIT_OK


def cmd_score(args) -> int:
    trajectories = load_trajectories(args.trajectories)
    questions = _join(trajectories, load_dataset(args.dataset))
    table = score_batch(trajectories, questions, RewardConfig(args.gamma, args.scheme, not args.inspected_only))
    text = table.to_json() if args.format == "json" else table.to_csv()
    _write(text, args.out, f"rewards_{args.scheme}.{args.format}" if args.out else None)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    questions = [q for q in load_dataset(args.dataset) if q.evidence]
    if not questions:
        raise InputError(f"{args.dataset} has no questions with evidence intervals")
    profile = load_profile(args.inspector_profile)
    factory = BackendFactory({"inspector": profile})
    indexes = IndexCache(args.index_dir) if args.index_dir else None
    config = EngineConfig(clip_len_s=args.clip_len)
    results = []
    skipped = 0
    for q in questions:
        index = indexes.get(q.video_id) if indexes and indexes.path(q.video_id).exists() else None
        try:
            nt, gt = calibration_probe(q, index, factory.chat_for("inspector", q.question_id), args.seed, config)
        except NoDisjointClip as exc:
            log.warning("skipping %s", exc)
            skipped += 1
            continue
        results += [nt, gt]
    rows = calibration_table(results, args.label or profile.model_id or Path(args.inspector_profile).stem)
    text = render_calibration(rows)
    if skipped:
        text += f"\n({skipped} question(s) skipped: no disjoint non-target clip)"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        probes = [
            {
                "question_id": r.question_id,
                "probe": r.probe,
                "span": r.span.to_list(),
                "z": r.verdict.z,
                "answer": r.verdict.answer_text,
                "confidence": r.verdict.confidence,
                "correct": r.correct,
            }
            for r in results
        ]
        doc = {"schema": "calibration/1", "seed": args.seed, "rows": [r.to_dict() for r in rows], "probes": probes}
        (out / "calibration.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write(text, None)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inspectgate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("index", help="caption JSONL -> clip index")
    s.add_argument("--video-meta", required=True, help='JSON {"video_id": ..., "duration_s": ...}')
    s.add_argument("--captions", required=True)
    s.add_argument("--out", required=True, help="index directory; writes <video_id>.jsonl")
    s.add_argument("--embedder-profile", default="stub", help="'stub', 'stub:<dim>' or a JSON profile")
    s.add_argument("--clip-len", type=_positive_float, default=16.0)
    s.set_defaults(fn=cmd_index)

    s = sub.add_parser("run", help="run episodes over a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--index-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("--budget", type=_positive_int, help="turn budget K")
    s.add_argument("--topk", type=_positive_int, help="retrieval depth k")
    s.add_argument("--parallel", type=_positive_int)
    s.add_argument("--resume", action="store_true", help="skip question ids already in --out")
    s.add_argument("--config", help="JSON with 'engine' and 'profiles' sections")
    for role in ("planner", "inspector", "filter", "embedder"):
        s.add_argument(f"--{role}-profile")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("audit", help="grounding diagnostics over trajectories")
    s.add_argument("--trajectories", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--gamma", type=_positive_float, default=DEFAULT_GAMMA)
    s.add_argument("--judge-profile")
    s.add_argument("--report", choices=("table", "json", "csv"), default="table")
    s.add_argument("--inspected-only", action="store_true", help="ignore retrieval spans when scoring access")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_audit)

    s = sub.add_parser("score", help="rewards over trajectories")
    s.add_argument("--trajectories", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--scheme", choices=("ans", "evd"), default="ans")
    s.add_argument("--gamma", type=_positive_float, default=DEFAULT_GAMMA)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--inspected-only", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("calibrate", help="inspector refusal on non-target vs ground-truth clips")
    s.add_argument("--dataset", required=True)
    s.add_argument("--index-dir")
    s.add_argument("--inspector-profile", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clip-len", type=_positive_float, default=16.0)
    s.add_argument("--label")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_calibrate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.fn(args)
    except (InputError, InspectGateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
