"""Batch runner: concurrent episodes, ordered incremental JSONL output, resumable."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from .backend import BackendFactory
from .clipindex import ClipIndex, index_path, load_index
from .engine import run_episode
from .errors import InspectGateError, RejectedInput
from .protocol import template_hashes
from .timeline import VideoMeta
from .trajectory import EngineConfig, Outcome, QuestionRecord, Trajectory

log = logging.getLogger(__name__)

TRAJECTORIES = "trajectories.jsonl"
MANIFEST = "manifest.json"


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class IndexCache:
    """Loads each video's index once; safe to share across worker threads."""

    def __init__(self, index_dir: str | Path):
        self.index_dir = Path(index_dir)
        self._cache: dict[str, ClipIndex] = {}
        self._lock = threading.Lock()

    def path(self, video_id: str) -> Path:
        return index_path(self.index_dir, video_id)

    def get(self, video_id: str) -> ClipIndex:
        with self._lock:
            if video_id not in self._cache:
                self._cache[video_id] = load_index(self.path(video_id))
            return self._cache[video_id]


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    templates: dict[str, str]
    dataset: dict
    indexes: dict[str, dict]
    profiles: dict[str, dict]
    started_at: str
    finished_at: str | None = None
    status: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": "manifest/1", **self.__dict__}

    def write(self, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)


def check_unique(questions: Sequence[QuestionRecord]) -> None:
    seen: set[str] = set()
    for q in questions:
        if q.question_id in seen:
            raise RejectedInput(f"duplicate question_id {q.question_id}")
        seen.add(q.question_id)


def read_completed(path: Path) -> dict[str, Trajectory]:
    """Trajectories already on disk. A torn final line from an interrupted run is cut off."""
    if not path.exists():
        return {}
    data = path.read_bytes()
    done: dict[str, Trajectory] = {}
    good_end = 0
    pos = 0
    for raw in data.splitlines(keepends=True):
        pos += len(raw)
        if not raw.strip():
            good_end = pos
            continue
        try:
            t = Trajectory.from_dict(json.loads(raw))
        except (ValueError, KeyError, TypeError, InspectGateError):
            if pos == len(data):
                log.warning("dropping incomplete last line of %s", path)
                break
            raise
        if not raw.endswith(b"\n"):
            # complete JSON but no newline: keep it, restore the terminator
            with open(path, "ab") as fh:
                fh.write(b"\n")
        done[t.question_id] = t
        good_end = pos
    if good_end < len(data):
        with open(path, "r+b") as fh:
            fh.truncate(good_end)
    return done


class OrderedSink:
    """Writes results in dataset order as soon as each prefix is complete."""

    def __init__(self, path: Path, order: Sequence[str]):
        self.path = path
        self.order = list(order)
        self.next = 0
        self.pending: dict[str, Trajectory] = {}
        self.lock = threading.Lock()

    def put(self, t: Trajectory) -> None:
        with self.lock:
            self.pending[t.question_id] = t
            with open(self.path, "a", encoding="utf-8") as fh:
                while self.next < len(self.order) and self.order[self.next] in self.pending:
                    fh.write(self.pending.pop(self.order[self.next]).to_json() + "\n")
                    fh.flush()
                    self.next += 1


def _failed(q: QuestionRecord, config: EngineConfig, detail: str) -> Trajectory:
    return Trajectory(q.question_id, q.video_id, config.mode, (), Outcome.failure(detail), config.to_dict())


def run_one(q: QuestionRecord, config: EngineConfig, factory: BackendFactory, indexes: IndexCache) -> Trajectory:
    try:
        index = indexes.get(q.video_id)
        backends = factory.for_question(q.question_id)
        return run_episode(q, VideoMeta(q.video_id, q.duration_s), index, backends, config)
    except Exception as exc:  # isolate: one bad episode never stops the batch
        log.error("episode %s aborted: %s: %s", q.question_id, type(exc).__name__, exc)
        return _failed(q, config, f"{type(exc).__name__}: {exc}")


@dataclass
class BatchResult:
    trajectories: list[Trajectory]
    manifest: RunManifest
    skipped: int

    @property
    def n_failed(self) -> int:
        return sum(1 for t in self.trajectories if t.outcome.status == "backend_failure")


def run_batch(
    questions: Sequence[QuestionRecord],
    config: EngineConfig,
    factory: BackendFactory,
    index_dir: str | Path,
    out_dir: str | Path,
    parallelism: int = 1,
    resume: bool = False,
    dataset_path: str | Path | None = None,
    on_result: Callable[[Trajectory], None] | None = None,
) -> BatchResult:
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    check_unique(questions)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_path = out / TRAJECTORIES
    if resume:
        done = read_completed(traj_path)
    else:
        traj_path.write_text("", encoding="utf-8")
        done = {}

    indexes = IndexCache(index_dir)
    index_hashes = {}
    for vid in sorted({q.video_id for q in questions}):
        p = indexes.path(vid)
        index_hashes[vid] = {"path": str(p), "sha256": file_sha256(p) if p.exists() else None}
    manifest = RunManifest(
        config=config.to_dict(),
        config_hash=config.digest(),
        templates=template_hashes(),
        dataset={
            "path": str(dataset_path) if dataset_path else None,
            "sha256": file_sha256(dataset_path) if dataset_path else None,
            "n": len(questions),
        },
        indexes=index_hashes,
        profiles={k: p.public() for k, p in factory.profiles.items()},
        started_at=_now(),
        status={qid: t.outcome.status for qid, t in done.items()},
    )
    manifest_path = out / MANIFEST
    manifest.write(manifest_path)  # artifact hashes land on disk before any episode runs

    todo = [q for q in questions if q.question_id not in done]
    sink = OrderedSink(traj_path, [q.question_id for q in todo])
    results: dict[str, Trajectory] = dict(done)

    def work(q: QuestionRecord) -> Trajectory:
        t = run_one(q, config, factory, indexes)
        sink.put(t)
        if on_result:
            on_result(t)
        return t

    if parallelism == 1:
        finished = [work(q) for q in todo]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            finished = list(pool.map(work, todo))
    for t in finished:
        results[t.question_id] = t
        manifest.status[t.question_id] = t.outcome.status

    manifest.finished_at = _now()
    manifest.status = {q.question_id: manifest.status[q.question_id] for q in questions}
    manifest.write(manifest_path)
    ordered = [results[q.question_id] for q in questions]
    return BatchResult(ordered, manifest, skipped=len(done))
