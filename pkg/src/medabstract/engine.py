"""Run orchestration: iterate (entry x task x config), consult the response
cache, call providers under a concurrency cap, parse outputs, and persist
predictions in corpus order so result files are byte-stable regardless of
completion order.
"""

from __future__ import annotations

import json
import os
import random
import re
import threading
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .domain import (
    OUTPUT_BINARY,
    MedEntry,
    Prediction,
    RunConfig,
    TaskSpec,
    content_digest,
)
from .errors import DataError, MedabstractError
from .ingest import write_corpus
from .promptkit import ShotExample, build_prompt, select_shots
from .providers import (
    CompletionRequest,
    Provider,
    ProviderRegistry,
    RetryPolicy,
    TransportError,
)

PREDICTIONS_FILE = "predictions.jsonl"
MANIFEST_FILE = "manifest.json"
CORPUS_FILE = "corpus.csv"
GRID_MANIFEST_FILE = "grid_manifest.json"

STATUS_COMPLETE = "complete"
STATUS_ABORTED = "aborted"

DEFAULT_ABORT_FRACTION = 0.2


class RunAbortedError(MedabstractError):
    """Too many transport failures; partial results were preserved."""

    def __init__(self, message: str, run_dir: Optional[Path] = None) -> None:
        super().__init__(message)
        self.run_dir = run_dir


def parse_binary_output(raw: str) -> Optional[int]:
    """Strict parse: after trimming, exactly "1" or "0". Anything else is
    invalid and will be scored as incorrect, never re-interpreted."""
    text = raw.strip()
    if text == "1":
        return 1
    if text == "0":
        return 0
    return None


_WS_RUN = re.compile(r"\s+")


def normalize_freetext_output(raw: str) -> Optional[str]:
    """Trim, collapse internal whitespace runs, lowercase. Empty -> invalid."""
    text = _WS_RUN.sub(" ", raw.strip()).lower()
    return text or None


def cache_key(model_id: str, temperature: float, prompt_digest: str) -> str:
    """Content-derived key: equal inputs always map to the same key.
    Temperature is part of the key so sampled responses are replayed,
    not resampled."""
    return content_digest("cachekey", model_id, repr(temperature), prompt_digest)


class ResponseCache:
    """Content-addressed on-disk store of raw response text.

    Layout: <cache_dir>/<key[:2]>/<key>.json holding the verbatim output
    text plus the measured latency and attempt count, so cache hits replay
    the original response exactly. Nothing is ever evicted within a run.
    Reads are lock-free; writes go through a temp file + atomic rename.
    """

    def __init__(self, cache_dir: Path) -> None:
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[dict]:
        path = self._path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            return None

    def put(self, key: str, output_text: str, latency_ms: int, attempts: int) -> None:
        path = self._path(key)
        payload = json.dumps(
            {"output_text": output_text, "latency_ms": latency_ms, "attempts": attempts},
            ensure_ascii=False,
        )
        with self._write_lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(payload, encoding="utf-8")
            os.replace(tmp, path)


@dataclass
class RunManifest:
    run_id: str
    config: RunConfig
    corpus_digest: str
    tasks: list[str]
    started_at: str
    finished_at: str
    counts: dict[str, int]
    status: str = STATUS_COMPLETE
    seed: int = 0

    def to_dict(self) -> dict[str, object]:
        return {
            "run_id": self.run_id,
            "config": {
                "model_id": self.config.model_id,
                "provider_kind": self.config.provider_kind,
                "temperature": self.config.temperature,
                "shot_count": self.config.shot_count,
                "max_retries": self.config.max_retries,
                "concurrency_cap": self.config.concurrency_cap,
                "cache_enabled": self.config.cache_enabled,
            },
            "config_digest": self.config.digest(),
            "corpus_digest": self.corpus_digest,
            "tasks": list(self.tasks),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "counts": dict(self.counts),
            "status": self.status,
            "seed": self.seed,
        }


@dataclass
class RunResult:
    predictions: list[Prediction]
    manifest: RunManifest
    run_dir: Optional[Path] = None


def corpus_digest(corpus: list[MedEntry]) -> str:
    parts = ["corpus"]
    for e in corpus:
        parts.extend([e.id, e.drug_raw, e.route_raw, e.source, str(e.frequency)])
    return content_digest(*parts)


def run_id_for(config: RunConfig, corpus_dig: str, task: TaskSpec) -> str:
    return content_digest("run", config.digest(), corpus_dig, task.name)[:12]


def seed_for(config: RunConfig) -> int:
    """Jitter seed derived from the config so a replay from the manifest
    reproduces the same backoff schedule."""
    return int(config.digest()[:16], 16)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _predict_one(
    entry: MedEntry,
    task: TaskSpec,
    config: RunConfig,
    pool: list[ShotExample],
    provider: Provider,
    cache: Optional[ResponseCache],
    reprompt_invalid: int,
) -> tuple[Prediction, bool]:
    """Returns (prediction, cache_hit). Raises DataError for contract
    violations; provider errors become invalid predictions."""
    shots = select_shots(pool, config.shot_count, exclude=entry)
    prompt = build_prompt(task, entry, shots)
    key = cache_key(config.model_id, config.temperature, prompt.digest)

    cached = cache.get(key) if (cache is not None and config.cache_enabled) else None
    hit = cached is not None
    if cached is not None:
        raw = cached["output_text"]
        latency_ms = int(cached["latency_ms"])
        attempts = int(cached.get("attempts", 1))
    else:
        request = CompletionRequest(
            model_id=config.model_id,
            temperature=config.temperature,
            prompt_text=prompt.text,
        )
        response = provider.complete(request)
        raw = response.output_text
        latency_ms = response.latency_ms
        attempts = response.attempt_count
        if cache is not None and config.cache_enabled:
            cache.put(key, raw, latency_ms, attempts)

    parsed: Optional[object]
    for round_no in range(reprompt_invalid + 1):
        if task.output_domain == OUTPUT_BINARY:
            parsed = parse_binary_output(raw)
        else:
            parsed = normalize_freetext_output(raw)
        if parsed is not None or round_no == reprompt_invalid:
            break
        # Re-ask without the cache; a deterministic backend will simply
        # return the same text and we give up after the budget.
        request = CompletionRequest(
            model_id=config.model_id,
            temperature=config.temperature,
            prompt_text=prompt.text,
        )
        response = provider.complete(request)
        raw = response.output_text
        latency_ms = response.latency_ms
        attempts += response.attempt_count
        hit = False

    return (
        Prediction(
            entry_id=entry.id,
            task=task.name,
            config_digest=config.digest(),
            raw_output=raw,
            parsed=parsed,
            valid=parsed is not None,
            latency_ms=latency_ms,
            attempt_count=attempts,
        ),
        hit,
    )


def run_task(
    corpus: list[MedEntry],
    task: TaskSpec,
    config: RunConfig,
    shot_pool: list[ShotExample],
    provider: Provider,
    out_dir: Optional[Path] = None,
    cache: Optional[ResponseCache] = None,
    abort_fraction: float = DEFAULT_ABORT_FRACTION,
    reprompt_invalid: int = 0,
) -> RunResult:
    """Run one task over a corpus under one configuration.

    Permanent provider errors mark single predictions invalid and the run
    continues; transport failures (retries exhausted) on more than
    ``abort_fraction`` of entries abort the run with completed predictions
    preserved on disk.
    """
    if not corpus:
        raise DataError("corpus is empty")
    started = _utcnow()
    corpus_dig = corpus_digest(corpus)
    run_id = run_id_for(config, corpus_dig, task)

    results: dict[int, tuple[Prediction, bool]] = {}
    transport_failures = 0
    abort_budget = abort_fraction * len(corpus)
    fatal: Optional[BaseException] = None
    lock = threading.Lock()

    def work(index: int, entry: MedEntry) -> None:
        nonlocal transport_failures, fatal
        try:
            outcome = _predict_one(
                entry, task, config, shot_pool, provider, cache, reprompt_invalid
            )
            with lock:
                results[index] = outcome
        except TransportError as exc:
            with lock:
                transport_failures += 1
                results[index] = (
                    _error_prediction(entry, task, config, str(exc)),
                    False,
                )
        except DataError:
            raise
        except MedabstractError as exc:
            # Permanent request errors, missing mock rules, and similar:
            # record and continue.
            with lock:
                results[index] = (
                    _error_prediction(entry, task, config, str(exc)),
                    False,
                )

    aborted = False
    with ThreadPoolExecutor(max_workers=config.concurrency_cap) as pool_exec:
        pending: set[Future] = {
            pool_exec.submit(work, i, entry) for i, entry in enumerate(corpus)
        }
        while pending:
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                exc = fut.exception()
                if exc is not None:
                    fatal = exc
            if fatal is not None or transport_failures > abort_budget:
                for fut in pending:
                    fut.cancel()
                pending = set()
                if fatal is None:
                    aborted = True
    if fatal is not None:
        raise fatal

    predictions = [results[i][0] for i in sorted(results)]
    cache_hits = sum(1 for i in sorted(results) if results[i][1])
    valid = sum(1 for p in predictions if p.valid)
    manifest = RunManifest(
        run_id=run_id,
        config=config,
        corpus_digest=corpus_dig,
        tasks=[task.name],
        started_at=started,
        finished_at=_utcnow(),
        counts={
            "total": len(predictions),
            "valid": valid,
            "invalid": len(predictions) - valid,
            "cache_hits": cache_hits,
        },
        status=STATUS_ABORTED if aborted else STATUS_COMPLETE,
        seed=seed_for(config),
    )
    result = RunResult(predictions=predictions, manifest=manifest)
    if out_dir is not None:
        result.run_dir = out_dir
        persist_run(result, corpus, out_dir)
    if aborted:
        raise RunAbortedError(
            f"run {run_id}: transport failures on {transport_failures} entries "
            f"exceeded the abort threshold ({abort_fraction:.0%} of {len(corpus)})",
            run_dir=out_dir,
        )
    return result


def _error_prediction(
    entry: MedEntry, task: TaskSpec, config: RunConfig, error: str
) -> Prediction:
    return Prediction(
        entry_id=entry.id,
        task=task.name,
        config_digest=config.digest(),
        raw_output="",
        parsed=None,
        valid=False,
        latency_ms=0,
        attempt_count=1,
        error=error,
    )


def prediction_line(p: Prediction, config: RunConfig) -> str:
    record: dict[str, object] = {
        "entry_id": p.entry_id,
        "task": p.task,
        "model_id": config.model_id,
        "temperature": config.temperature,
        "shot_count": config.shot_count,
        "raw_output": p.raw_output,
        "parsed": p.parsed,
        "valid": p.valid,
        "latency_ms": p.latency_ms,
    }
    if p.error is not None:
        record["error"] = p.error
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def persist_run(result: RunResult, corpus: list[MedEntry], out_dir: Path) -> None:
    """Write predictions (corpus order), manifest, and a corpus snapshot.
    The directory is self-contained: enough to re-execute the run against
    the cache or to review it."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [prediction_line(p, result.manifest.config) for p in result.predictions]
    (out_dir / PREDICTIONS_FILE).write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )
    (out_dir / MANIFEST_FILE).write_text(
        json.dumps(result.manifest.to_dict(), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    write_corpus(corpus, out_dir / CORPUS_FILE)


def read_predictions(path: Path, config_digest: str = "") -> list[Prediction]:
    predictions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            predictions.append(
                Prediction(
                    entry_id=rec["entry_id"],
                    task=rec["task"],
                    config_digest=config_digest,
                    raw_output=rec["raw_output"],
                    parsed=rec["parsed"],
                    valid=rec["valid"],
                    latency_ms=rec["latency_ms"],
                    error=rec.get("error"),
                )
            )
    return predictions


def _sanitize(token: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "-", token)


def cell_id_for(model_id: str, temperature: float, shot_count: int, task_name: str) -> str:
    return f"{_sanitize(model_id)}__t{temperature:g}__s{shot_count}__{task_name}"


@dataclass
class GridCell:
    cell_id: str
    model_id: str
    temperature: float
    shot_count: int
    task: str
    status: str
    run_id: str
    run_dir: Optional[Path] = None
    result: Optional[RunResult] = None

    def to_dict(self) -> dict[str, object]:
        return {
            "cell_id": self.cell_id,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "shot_count": self.shot_count,
            "task": self.task,
            "status": self.status,
            "run_id": self.run_id,
        }


@dataclass
class GridResult:
    cells: list[GridCell] = field(default_factory=list)

    @property
    def status(self) -> str:
        return (
            STATUS_COMPLETE
            if all(c.status == STATUS_COMPLETE for c in self.cells)
            else "partial"
        )

    def to_dict(self) -> dict[str, object]:
        return {"status": self.status, "cells": [c.to_dict() for c in self.cells]}


def run_grid(
    corpus: list[MedEntry],
    tasks: list[TaskSpec],
    models: list[str],
    temperatures: list[float],
    shot_counts: list[int],
    shot_pools: dict[str, list[ShotExample]],
    registry: ProviderRegistry,
    out_root: Optional[Path] = None,
    cache: Optional[ResponseCache] = None,
    max_retries: int = 2,
    concurrency_cap: int = 4,
    cache_enabled: bool = True,
    abort_fraction: float = DEFAULT_ABORT_FRACTION,
    reprompt_invalid: int = 0,
) -> GridResult:
    """One run per (model x temperature x shot_count x task): the complete
    cross product, in a fixed iteration order. An aborted cell marks the
    grid partial; completed cells are preserved."""
    if not (models and temperatures and shot_counts and tasks):
        raise DataError("grid axes must all be non-empty")
    # Resolve every model up front so configuration errors surface before
    # any provider call.
    for model_id in models:
        registry.spec_for(model_id)

    grid = GridResult()
    for model_id in models:
        spec = registry.spec_for(model_id)
        for temperature in temperatures:
            for shot_count in shot_counts:
                for task in tasks:
                    config = RunConfig(
                        model_id=model_id,
                        provider_kind=spec.provider_kind,
                        temperature=temperature,
                        shot_count=shot_count,
                        max_retries=max_retries,
                        concurrency_cap=concurrency_cap,
                        cache_enabled=cache_enabled,
                    )
                    provider = registry.build(
                        model_id,
                        retry=RetryPolicy(max_retries=max_retries),
                        rng=random.Random(seed_for(config)),
                    )
                    cell_id = cell_id_for(model_id, temperature, shot_count, task.name)
                    cell_dir = out_root / "cells" / cell_id if out_root is not None else None
                    pool = shot_pools.get(task.name, [])
                    run_id = run_id_for(config, corpus_digest(corpus), task)
                    try:
                        result = run_task(
                            corpus,
                            task,
                            config,
                            pool,
                            provider,
                            out_dir=cell_dir,
                            cache=cache,
                            abort_fraction=abort_fraction,
                            reprompt_invalid=reprompt_invalid,
                        )
                        status = STATUS_COMPLETE
                    except RunAbortedError:
                        result = None
                        status = STATUS_ABORTED
                    grid.cells.append(
                        GridCell(
                            cell_id=cell_id,
                            model_id=model_id,
                            temperature=temperature,
                            shot_count=shot_count,
                            task=task.name,
                            status=status,
                            run_id=run_id,
                            run_dir=cell_dir,
                            result=result,
                        )
                    )
    if out_root is not None:
        out_root.mkdir(parents=True, exist_ok=True)
        (out_root / GRID_MANIFEST_FILE).write_text(
            json.dumps(grid.to_dict(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
    return grid
