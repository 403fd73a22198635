"""Local HTTP service for the clinician review loop.

Serves prediction queues for a run, records accept/correct decisions with
client-measured timing, derives live savings stats, and promotes corrected
items into the shot pool. The decision log is an append-only JSONL file per
session and is the only authoritative state: every acknowledged decision is
fsynced before the response goes out, and sessions are rebuilt from the logs
on startup, so a kill-and-restart loses nothing.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI, HTTPException, Query
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .domain import OUTPUT_BINARY, registry_by_name, task_registry
from .engine import CORPUS_FILE, MANIFEST_FILE, PREDICTIONS_FILE, read_predictions
from .errors import ConfigError
from .evalkit import TASK_GROUPS, TimingRecord, savings_percent
from .ingest import parse_corpus
from .promptkit import ShotExample, append_shots

VERDICT_ACCEPT = "accept"
VERDICT_CORRECT = "correct"


def task_group(task_name: str) -> str:
    if task_name == "generic_name":
        return "generic"
    if task_name == "generic_route":
        return "route"
    return "binary"


@dataclass
class QueueItem:
    index: int
    entry_id: str
    drug_raw: str
    route_raw: str
    task: str
    parsed: Optional[Union[str, int]]
    raw_output: str
    valid: bool


@dataclass
class LoadedRun:
    run_id: str
    run_dir: Path
    model_id: str
    items: list[QueueItem]
    tasks: list[str]


@dataclass
class Session:
    session_id: str
    run_id: str
    reviewer_id: str
    started_at: str
    log_path: Path
    # token -> decision record; key (entry_id, task) -> token
    decisions: dict[str, dict] = field(default_factory=dict)
    decided_keys: dict[tuple[str, str], str] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


def _append_durable(path: Path, record: dict) -> None:
    line = json.dumps(record, ensure_ascii=False) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


def discover_runs(runs_root: Path) -> dict[str, LoadedRun]:
    """Find every run directory (manifest + predictions + corpus snapshot)
    under the root, including grid cells."""
    runs: dict[str, LoadedRun] = {}
    for manifest_path in sorted(runs_root.rglob(MANIFEST_FILE)):
        run_dir = manifest_path.parent
        predictions_path = run_dir / PREDICTIONS_FILE
        corpus_path = run_dir / CORPUS_FILE
        if not predictions_path.exists() or not corpus_path.exists():
            continue
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        corpus, _ = parse_corpus(corpus_path)
        by_id = {e.id: e for e in corpus}
        preds = read_predictions(predictions_path, manifest.get("config_digest", ""))
        items = []
        for i, p in enumerate(preds):
            entry = by_id.get(p.entry_id)
            if entry is None:
                continue
            items.append(
                QueueItem(
                    index=i,
                    entry_id=p.entry_id,
                    drug_raw=entry.drug_raw,
                    route_raw=entry.route_raw,
                    task=p.task,
                    parsed=p.parsed,
                    raw_output=p.raw_output,
                    valid=p.valid,
                )
            )
        run_id = manifest["run_id"]
        runs[run_id] = LoadedRun(
            run_id=run_id,
            run_dir=run_dir,
            model_id=manifest["config"]["model_id"],
            items=items,
            tasks=list(manifest.get("tasks", [])),
        )
    return runs


class ReviewState:
    """Everything the endpoints need; constructed once per process."""

    def __init__(
        self,
        runs_root: Path,
        data_dir: Path,
        shot_pool_path: Optional[Path] = None,
        baseline: Optional[dict[str, int]] = None,
        run_filter: Optional[str] = None,
    ) -> None:
        self.runs = discover_runs(runs_root)
        if run_filter is not None:
            if run_filter not in self.runs:
                raise ConfigError(f"run {run_filter!r} not found under {runs_root}")
            self.runs = {run_filter: self.runs[run_filter]}
        self.sessions_dir = data_dir / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.shot_pool_path = shot_pool_path
        self.baseline = baseline or {}
        for group in self.baseline:
            if group not in TASK_GROUPS:
                raise ConfigError(f"baseline group must be one of {TASK_GROUPS}, got {group!r}")
        self.tasks_by_name = registry_by_name(task_registry())
        self.sessions: dict[str, Session] = {}
        self._replay_logs()

    def _replay_logs(self) -> None:
        for log_path in sorted(self.sessions_dir.glob("*.jsonl")):
            session: Optional[Session] = None
            with open(log_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    if rec.get("type") == "session":
                        session = Session(
                            session_id=rec["session_id"],
                            run_id=rec["run_id"],
                            reviewer_id=rec.get("reviewer_id", "default"),
                            started_at=rec.get("started_at", ""),
                            log_path=log_path,
                        )
                    elif rec.get("type") == "decision" and session is not None:
                        session.decisions[rec["decision_token"]] = rec
                        session.decided_keys[(rec["entry_id"], rec["task"])] = rec[
                            "decision_token"
                        ]
            if session is not None:
                self.sessions[session.session_id] = session

    def create_session(self, run_id: str, reviewer_id: str) -> Session:
        if run_id not in self.runs:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        session_id = uuid.uuid4().hex[:12]
        log_path = self.sessions_dir / f"{session_id}.jsonl"
        session = Session(
            session_id=session_id,
            run_id=run_id,
            reviewer_id=reviewer_id,
            started_at=_now_iso(),
            log_path=log_path,
        )
        _append_durable(
            log_path,
            {
                "type": "session",
                "session_id": session_id,
                "run_id": run_id,
                "reviewer_id": reviewer_id,
                "started_at": session.started_at,
            },
        )
        self.sessions[session_id] = session
        return session

    def session(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return session

    def run(self, run_id: str) -> LoadedRun:
        run = self.runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return run

    def stats_for(self, session: Session) -> dict:
        run = self.run(session.run_id)
        groups = {g: {"items": 0, "corrections": 0, "review_ms": 0} for g in TASK_GROUPS}
        received: list[int] = []
        for rec in session.decisions.values():
            g = task_group(rec["task"])
            for scope in (g, "total"):
                groups[scope]["items"] += 1
                groups[scope]["review_ms"] += int(rec["elapsed_ms"])
                if rec["verdict"] == VERDICT_CORRECT:
                    groups[scope]["corrections"] += 1
            received.append(int(rec["received_at_ms"]))
        savings: dict[str, Optional[float]] = {}
        for group, counts in groups.items():
            baseline_s = self.baseline.get(group)
            if baseline_s and counts["items"] > 0:
                record = TimingRecord(
                    database=session.run_id,
                    group=group,
                    annotation_s=baseline_s,
                    revision_s=int(round(counts["review_ms"] / 1000.0)),
                    corrections=counts["corrections"],
                    items=counts["items"],
                )
                savings[group] = savings_percent(record)
            else:
                savings[group] = None
        span_ms = max(received) - min(received) if len(received) >= 2 else 0
        return {
            "session_id": session.session_id,
            "run_id": session.run_id,
            "total_items": len(run.items),
            "reviewed": groups["total"]["items"],
            "corrections": groups["total"]["corrections"],
            "review_ms": groups["total"]["review_ms"],
            "groups": groups,
            "savings": savings,
            "savings_defined": any(v is not None for v in savings.values()),
            "server_receipt_span_ms": span_ms,
        }


def _now_iso() -> str:
    from datetime import datetime, timezone

    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class SessionIn(BaseModel):
    run_id: str
    reviewer_id: str = "default"


class DecisionIn(BaseModel):
    entry_id: str
    task: str
    verdict: str
    corrected_value: Optional[Union[int, str]] = None
    elapsed_ms: int = Field(ge=0)
    decision_token: str
    reviewer_id: str = "default"


def create_app(
    runs_root: Path,
    data_dir: Path,
    shot_pool_path: Optional[Path] = None,
    baseline: Optional[dict[str, int]] = None,
    run_filter: Optional[str] = None,
    ui_dir: Optional[Path] = None,
) -> FastAPI:
    state = ReviewState(
        runs_root=runs_root,
        data_dir=data_dir,
        shot_pool_path=shot_pool_path,
        baseline=baseline,
        run_filter=run_filter,
    )
    app = FastAPI(title="medabstract review service")
    app.state.review = state

    @app.get("/runs")
    def list_runs() -> list[dict]:
        return [
            {
                "run_id": run.run_id,
                "model_id": run.model_id,
                "tasks": run.tasks,
                "total_items": len(run.items),
            }
            for run in state.runs.values()
        ]

    @app.get("/runs/{run_id}/queue")
    def get_queue(
        run_id: str,
        task: Optional[str] = None,
        cursor: int = Query(default=0, ge=0),
        limit: int = Query(default=50, ge=1, le=500),
        session: Optional[str] = None,
    ) -> dict:
        run = state.run(run_id)
        decided: dict[tuple[str, str], dict] = {}
        if session is not None:
            sess = state.session(session)
            decided = {
                key: sess.decisions[token] for key, token in sess.decided_keys.items()
            }
        items = [i for i in run.items if task is None or i.task == task]
        page = items[cursor : cursor + limit]
        out = []
        for item in page:
            rec = decided.get((item.entry_id, item.task))
            out.append(
                {
                    "index": item.index,
                    "entry_id": item.entry_id,
                    "drug_raw": item.drug_raw,
                    "route_raw": item.route_raw,
                    "task": item.task,
                    "task_definition": _definition_for(state, item.task),
                    "parsed": item.parsed,
                    "raw_output": item.raw_output,
                    "valid": item.valid,
                    "decided": rec is not None,
                    "verdict": rec["verdict"] if rec else None,
                    "corrected_value": rec.get("corrected_value") if rec else None,
                }
            )
        return {"items": out, "cursor": cursor, "total": len(items)}

    @app.post("/sessions")
    def create_session(body: SessionIn) -> dict:
        session = state.create_session(body.run_id, body.reviewer_id)
        return {
            "session_id": session.session_id,
            "run_id": session.run_id,
            "reviewer_id": session.reviewer_id,
            "started_at": session.started_at,
        }

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        session = state.session(session_id)
        return {
            "session_id": session.session_id,
            "run_id": session.run_id,
            "reviewer_id": session.reviewer_id,
            "started_at": session.started_at,
            "decisions": len(session.decisions),
        }

    @app.post("/sessions/{session_id}/decisions")
    def post_decision(session_id: str, body: DecisionIn) -> dict:
        session = state.session(session_id)
        run = state.run(session.run_id)
        with session.lock:
            # Idempotent retry: same token means the decision was already
            # acknowledged; report current stats without changing anything.
            if body.decision_token in session.decisions:
                return state.stats_for(session)
            key = (body.entry_id, body.task)
            if not any(i.entry_id == body.entry_id and i.task == body.task for i in run.items):
                raise HTTPException(
                    status_code=404,
                    detail=f"no queue item for entry {body.entry_id!r} task {body.task!r}",
                )
            if key in session.decided_keys:
                raise HTTPException(
                    status_code=409,
                    detail=f"item already decided in this session: {key}",
                )
            if body.verdict not in (VERDICT_ACCEPT, VERDICT_CORRECT):
                raise HTTPException(status_code=422, detail=f"unknown verdict {body.verdict!r}")
            corrected = None
            if body.verdict == VERDICT_CORRECT:
                corrected = _validate_corrected_value(state, body.task, body.corrected_value)
            record = {
                "type": "decision",
                "entry_id": body.entry_id,
                "task": body.task,
                "verdict": body.verdict,
                "corrected_value": corrected,
                "elapsed_ms": body.elapsed_ms,
                "decision_token": body.decision_token,
                "reviewer_id": body.reviewer_id,
                "decided_at": _now_iso(),
                "received_at_ms": int(time.time() * 1000),
            }
            _append_durable(session.log_path, record)
            session.decisions[body.decision_token] = record
            session.decided_keys[key] = body.decision_token
            return state.stats_for(session)

    @app.get("/sessions/{session_id}/stats")
    def get_stats(session_id: str) -> dict:
        return state.stats_for(state.session(session_id))

    @app.post("/sessions/{session_id}/promote")
    def promote(session_id: str, task: str) -> dict:
        session = state.session(session_id)
        run = state.run(session.run_id)
        if state.shot_pool_path is None:
            raise HTTPException(status_code=400, detail="no shot pool configured")
        by_key = {(i.entry_id, i.task): i for i in run.items}
        shots = []
        for rec in session.decisions.values():
            if rec["task"] != task or rec["verdict"] != VERDICT_CORRECT:
                continue
            item = by_key.get((rec["entry_id"], rec["task"]))
            if item is None:
                continue
            shots.append(
                ShotExample(
                    drug_raw=item.drug_raw,
                    route_raw=item.route_raw,
                    expected_output=str(rec["corrected_value"]),
                )
            )
        if not shots:
            raise HTTPException(
                status_code=400, detail=f"session has no corrections for task {task!r}"
            )
        appended = append_shots(state.shot_pool_path, task, shots)
        return {"task": task, "appended": appended}

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def _definition_for(state: ReviewState, task_name: str) -> str:
    task = state.tasks_by_name.get(task_name)
    return task.definition if task is not None else ""


def _validate_corrected_value(
    state: ReviewState, task_name: str, value: Optional[Union[int, str]]
) -> Union[int, str]:
    task = state.tasks_by_name.get(task_name)
    if task is None:
        raise HTTPException(status_code=422, detail=f"unknown task {task_name!r}")
    if value is None:
        raise HTTPException(status_code=422, detail="corrected_value is required for correct")
    if task.output_domain == OUTPUT_BINARY:
        if str(value).strip() not in ("0", "1"):
            raise HTTPException(
                status_code=422,
                detail=f"corrected value for {task_name} must be 0 or 1, got {value!r}",
            )
        return int(str(value).strip())
    text = str(value).strip().lower()
    if not text:
        raise HTTPException(status_code=422, detail="corrected free-text value is empty")
    return text
