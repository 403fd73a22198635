"""Score predictions against gold labels and shape the results into grid
reports and annotation-time savings summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .domain import GoldLabel, Prediction
from .engine import (
    GRID_MANIFEST_FILE,
    MANIFEST_FILE,
    PREDICTIONS_FILE,
    STATUS_COMPLETE,
    normalize_freetext_output,
    read_predictions,
)
from .errors import DataError

TASK_GROUPS = ("generic", "route", "binary", "total")


class ScoringError(DataError):
    """Gold and predictions do not line up one-to-one."""


@dataclass(frozen=True)
class EvalResult:
    task: str
    config_digest: str
    n: int
    accuracy: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    correct: int = 0
    f1: Optional[float] = None

    def to_dict(self) -> dict[str, object]:
        return {
            "task": self.task,
            "config_digest": self.config_digest,
            "n": self.n,
            "accuracy": self.accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "correct": self.correct,
            "f1": self.f1,
        }


def _pred_by_entry(preds: list[Prediction], task: str) -> dict[str, Prediction]:
    out: dict[str, Prediction] = {}
    for p in preds:
        if p.task != task:
            continue
        if p.entry_id in out:
            raise ScoringError(f"duplicate prediction for ({p.entry_id}, {task})")
        out[p.entry_id] = p
    return out


def score_binary(preds: list[Prediction], gold: list[GoldLabel], task: str) -> EvalResult:
    """Confusion counts, accuracy, and F1 for one binary task.

    Invalid predictions score as the wrong class for their gold item
    (gold=1 -> fn, gold=0 -> fp). F1 is 0 when precision + recall is 0;
    that convention matters because the classes are heavily imbalanced.
    """
    gold_items = [g for g in gold if g.task == task]
    if not gold_items:
        raise ScoringError(f"no gold labels for task {task}")
    by_entry = _pred_by_entry(preds, task)
    tp = fp = tn = fn = 0
    config_digest = ""
    for g in gold_items:
        p = by_entry.get(g.entry_id)
        if p is None:
            raise ScoringError(f"missing prediction for ({g.entry_id}, {task})")
        config_digest = p.config_digest
        predicted = p.parsed if p.valid else None
        if predicted == g.value:
            if g.value == 1:
                tp += 1
            else:
                tn += 1
        else:
            if g.value == 1:
                fn += 1
            else:
                fp += 1
    n = len(gold_items)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalResult(
        task=task,
        config_digest=config_digest,
        n=n,
        accuracy=(tp + tn) / n,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        f1=f1,
    )


def score_freetext(preds: list[Prediction], gold: list[GoldLabel], task: str) -> EvalResult:
    """Exact string match after both sides pass output normalization."""
    gold_items = [g for g in gold if g.task == task]
    if not gold_items:
        raise ScoringError(f"no gold labels for task {task} (accuracy undefined for n=0)")
    by_entry = _pred_by_entry(preds, task)
    correct = 0
    config_digest = ""
    for g in gold_items:
        p = by_entry.get(g.entry_id)
        if p is None:
            raise ScoringError(f"missing prediction for ({g.entry_id}, {task})")
        config_digest = p.config_digest
        if not p.valid:
            continue
        gold_norm = normalize_freetext_output(str(g.value))
        pred_norm = normalize_freetext_output(str(p.parsed))
        if gold_norm is not None and pred_norm == gold_norm:
            correct += 1
    n = len(gold_items)
    return EvalResult(
        task=task,
        config_digest=config_digest,
        n=n,
        accuracy=correct / n,
        correct=correct,
    )


@dataclass(frozen=True)
class TimingRecord:
    """Seconds spent annotating from scratch vs reviewing model output for
    one (database, task group) scope."""

    database: str
    group: str
    annotation_s: int
    revision_s: int
    corrections: int
    items: int

    def __post_init__(self) -> None:
        if self.group not in TASK_GROUPS:
            raise ValueError(f"group must be one of {TASK_GROUPS}, got {self.group!r}")
        if min(self.annotation_s, self.revision_s, self.corrections, self.items) < 0:
            raise ValueError("timing fields must be >= 0")
        if self.corrections > self.items:
            raise ValueError("corrections cannot exceed items")


def savings_percent(t: TimingRecord) -> float:
    """Relative review-time saving versus de-novo annotation, one decimal."""
    if t.annotation_s == 0:
        raise DataError(f"{t.database}/{t.group}: savings undefined for annotation_s=0")
    return round(100.0 * (t.annotation_s - t.revision_s) / t.annotation_s, 1)


TIMING_COLUMNS = ["database", "task_group", "annotation_s", "revision_s", "corrections", "items"]


def load_timing(path: Path) -> list[TimingRecord]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if header is None or [c for c in TIMING_COLUMNS if c not in header]:
                raise DataError(
                    f"timing file {path} must have header columns {TIMING_COLUMNS}, got {header}"
                )
            records = []
            for row in reader:
                records.append(
                    TimingRecord(
                        database=(row.get("database") or "").strip(),
                        group=(row.get("task_group") or "").strip(),
                        annotation_s=int(row["annotation_s"]),
                        revision_s=int(row["revision_s"]),
                        corrections=int(row["corrections"]),
                        items=int(row["items"]),
                    )
                )
            return records
    except OSError as exc:
        raise DataError(f"cannot read timing file {path}: {exc}") from exc


@dataclass
class CellEval:
    """One scored grid cell; eval is absent for aborted cells, which are
    flagged rather than dropped."""

    model_id: str
    temperature: float
    shot_count: int
    task: str
    status: str
    result: Optional[EvalResult] = None


def evaluate_grid(
    grid_dir: Path,
    gold: list[GoldLabel],
    binary_tasks: set[str],
) -> list[CellEval]:
    """Score every cell recorded in a grid manifest against the gold set."""
    manifest_path = grid_dir / GRID_MANIFEST_FILE
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read grid manifest {manifest_path}: {exc}") from exc
    evals: list[CellEval] = []
    for cell in manifest["cells"]:
        cell_dir = grid_dir / "cells" / cell["cell_id"]
        status = cell["status"]
        result: Optional[EvalResult] = None
        if status == STATUS_COMPLETE:
            cell_manifest = json.loads((cell_dir / MANIFEST_FILE).read_text(encoding="utf-8"))
            preds = read_predictions(
                cell_dir / PREDICTIONS_FILE, config_digest=cell_manifest["config_digest"]
            )
            task = cell["task"]
            if task in binary_tasks:
                result = score_binary(preds, gold, task)
            else:
                result = score_freetext(preds, gold, task)
        evals.append(
            CellEval(
                model_id=cell["model_id"],
                temperature=cell["temperature"],
                shot_count=cell["shot_count"],
                task=cell["task"],
                status=status,
                result=result,
            )
        )
    return evals


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_long_report(evals: list[CellEval], path: Path) -> None:
    """Plot-ready long format: one row per cell per metric. Binary cells
    carry both accuracy and F1 so either reading of the headline numbers can
    be compared."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model_id", "temperature", "shot_count", "task", "status", "metric", "value"]
        )
        for e in evals:
            base = [e.model_id, f"{e.temperature:g}", e.shot_count, e.task, e.status]
            if e.result is None:
                writer.writerow(base + ["accuracy", ""])
                continue
            writer.writerow(base + ["accuracy", _fmt(e.result.accuracy)])
            if e.result.f1 is not None:
                writer.writerow(base + ["f1", _fmt(e.result.f1)])
            writer.writerow(base + ["n", e.result.n])


def write_model_task_pivot(
    evals: list[CellEval],
    path: Path,
    shot_count: int,
    temperature: float,
    metric: str = "accuracy",
) -> None:
    """(model x task) table at a fixed shot count and temperature."""
    selected = [
        e for e in evals if e.shot_count == shot_count and e.temperature == temperature
    ]
    models = sorted({e.model_id for e in selected})
    tasks = sorted({e.task for e in selected})
    cells: dict[tuple[str, str], str] = {}
    for e in selected:
        if e.result is None:
            cells[(e.model_id, e.task)] = "aborted"
        elif metric == "f1":
            cells[(e.model_id, e.task)] = _fmt(e.result.f1)
        else:
            cells[(e.model_id, e.task)] = _fmt(e.result.accuracy)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id"] + tasks)
        for model in models:
            writer.writerow([model] + [cells.get((model, t), "") for t in tasks])


def write_shot_curves(
    evals: list[CellEval],
    out_dir: Path,
    temperature: float,
    metric: str = "accuracy",
) -> list[Path]:
    """Per task: (shot_count x model) table at a fixed temperature, one row
    per shot count present."""
    selected = [e for e in evals if e.temperature == temperature]
    tasks = sorted({e.task for e in selected})
    paths = []
    for task in tasks:
        task_evals = [e for e in selected if e.task == task]
        models = sorted({e.model_id for e in task_evals})
        shot_counts = sorted({e.shot_count for e in task_evals})
        cells: dict[tuple[int, str], str] = {}
        for e in task_evals:
            if e.result is None:
                cells[(e.shot_count, e.model_id)] = "aborted"
            elif metric == "f1":
                cells[(e.shot_count, e.model_id)] = _fmt(e.result.f1)
            else:
                cells[(e.shot_count, e.model_id)] = _fmt(e.result.accuracy)
        path = out_dir / f"shot_curve_{task}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["shot_count"] + models)
            for sc in shot_counts:
                writer.writerow([sc] + [cells.get((sc, m), "") for m in models])
        paths.append(path)
    return paths


def grid_report(
    evals: list[CellEval],
    out_dir: Path,
    pivot_shot_count: Optional[int] = None,
    pivot_temperature: Optional[float] = None,
) -> dict[str, object]:
    """Emit the long-format table, the (model x task) pivot, and per-task
    shot curves. Defaults pivot at the highest shot count and lowest
    temperature present."""
    if not evals:
        raise DataError("nothing to report: no grid cells")
    out_dir.mkdir(parents=True, exist_ok=True)
    if pivot_shot_count is None:
        pivot_shot_count = max(e.shot_count for e in evals)
    if pivot_temperature is None:
        pivot_temperature = min(e.temperature for e in evals)
    long_path = out_dir / "results_long.csv"
    write_long_report(evals, long_path)
    pivot_path = out_dir / "pivot_model_task.csv"
    write_model_task_pivot(evals, pivot_path, pivot_shot_count, pivot_temperature)
    curve_paths = write_shot_curves(evals, out_dir, pivot_temperature)
    return {
        "long": long_path,
        "pivot_model_task": pivot_path,
        "shot_curves": curve_paths,
        "pivot_shot_count": pivot_shot_count,
        "pivot_temperature": pivot_temperature,
    }
