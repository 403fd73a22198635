"""Load pre-exported corpora and gold labels from CSV files, pick the most
prevalent entries, and summarize labeled datasets per source database."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .domain import (
    BINARY_CLASS_IDS,
    OUTPUT_BINARY,
    GoldLabel,
    MedEntry,
    TaskSpec,
    entry_id_for,
    registry_by_name,
)
from .errors import DataError

CORPUS_COLUMNS = ["drug", "route", "count", "source"]
GOLD_COLUMNS = ["entry_id", "task", "value"]


@dataclass
class RowError:
    """A rejected input row; parsing continues past these."""

    line: int
    reason: str

    def to_dict(self) -> dict[str, object]:
        return {"line": self.line, "reason": self.reason}


@dataclass
class CorpusSummary:
    """Shape of one labeled dataset: unique gold routes and generic names,
    and positive counts for each binary class."""

    source: str
    n_entries: int
    n_unique_routes: int
    n_unique_generic_names: int
    positives_per_class: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, object]:
        return {
            "source": self.source,
            "n_entries": self.n_entries,
            "n_unique_routes": self.n_unique_routes,
            "n_unique_generic_names": self.n_unique_generic_names,
            "positives_per_class": dict(self.positives_per_class),
        }


def parse_corpus(path: Path) -> tuple[list[MedEntry], list[RowError]]:
    """Read a corpus CSV (columns drug, route, count, source) into entries.

    Ids are content hashes of (source, drug, route). Rows with an empty drug,
    a malformed count, or a duplicate identity are returned as errors while
    processing continues. An unreadable file is fatal.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if header is None or [c for c in CORPUS_COLUMNS if c not in header]:
                raise DataError(
                    f"corpus file {path} must have header columns {CORPUS_COLUMNS}, got {header}"
                )
            entries: list[MedEntry] = []
            errors: list[RowError] = []
            seen_ids: set[str] = set()
            for line_no, row in enumerate(reader, start=2):
                drug = (row.get("drug") or "").strip()
                route = (row.get("route") or "").strip()
                source = (row.get("source") or "").strip()
                if not drug:
                    errors.append(RowError(line_no, "empty drug"))
                    continue
                if not source:
                    errors.append(RowError(line_no, "empty source"))
                    continue
                try:
                    count = int((row.get("count") or "").strip())
                except ValueError:
                    errors.append(RowError(line_no, f"malformed count {row.get('count')!r}"))
                    continue
                if count < 0:
                    errors.append(RowError(line_no, f"negative count {count}"))
                    continue
                eid = entry_id_for(source, drug, route)
                if eid in seen_ids:
                    errors.append(
                        RowError(line_no, f"duplicate (source, drug, route): {source}/{drug}/{route}")
                    )
                    continue
                seen_ids.add(eid)
                entries.append(
                    MedEntry(id=eid, drug_raw=drug, route_raw=route, source=source, frequency=count)
                )
            return entries, errors
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc


def write_corpus(entries: list[MedEntry], path: Path) -> None:
    """Re-serialize a corpus; parse_corpus(write_corpus(c)) round-trips."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(CORPUS_COLUMNS)
        for e in entries:
            writer.writerow([e.drug_raw, e.route_raw, e.frequency, e.source])


def select_top_k(corpus: list[MedEntry], k: int) -> list[MedEntry]:
    """The min(k, |corpus|) most frequent entries, deterministically.

    Ties broken by (drug_raw, route_raw) ascending, so select_top_k(c, k) is
    always a prefix of select_top_k(c, k+1).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(corpus, key=lambda e: (-e.frequency, e.drug_raw, e.route_raw))
    return ordered[:k]


def load_gold(path: Path, tasks: list[TaskSpec]) -> tuple[list[GoldLabel], list[RowError]]:
    """Read a gold CSV (entry_id, task, value), normalizing values per task
    domain. Unknown task names and non-binary values for binary tasks are
    per-row errors."""
    by_name = registry_by_name(tasks)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if header is None or [c for c in GOLD_COLUMNS if c not in header]:
                raise DataError(
                    f"gold file {path} must have header columns {GOLD_COLUMNS}, got {header}"
                )
            labels: list[GoldLabel] = []
            errors: list[RowError] = []
            for line_no, row in enumerate(reader, start=2):
                entry_id = (row.get("entry_id") or "").strip()
                task_name = (row.get("task") or "").strip()
                value_raw = row.get("value") or ""
                if not entry_id:
                    errors.append(RowError(line_no, "empty entry_id"))
                    continue
                task = by_name.get(task_name)
                if task is None:
                    errors.append(RowError(line_no, f"unknown task {task_name!r}"))
                    continue
                if task.output_domain == OUTPUT_BINARY:
                    v = value_raw.strip()
                    if v not in ("0", "1"):
                        errors.append(
                            RowError(line_no, f"binary value must be 0 or 1, got {value_raw!r}")
                        )
                        continue
                    labels.append(GoldLabel(entry_id=entry_id, task=task_name, value=int(v)))
                else:
                    v = value_raw.strip().lower()
                    if not v:
                        errors.append(RowError(line_no, "empty free-text value"))
                        continue
                    labels.append(GoldLabel(entry_id=entry_id, task=task_name, value=v))
            return labels, errors
    except OSError as exc:
        raise DataError(f"cannot read gold file {path}: {exc}") from exc


def write_gold(labels: list[GoldLabel], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(GOLD_COLUMNS)
        for lab in labels:
            writer.writerow([lab.entry_id, lab.task, lab.value])


def summarize(
    corpus: list[MedEntry],
    gold: list[GoldLabel],
    source: Optional[str] = None,
) -> CorpusSummary:
    """Count unique gold route values, unique gold generic names, and
    positives per binary class over one source (or the whole corpus)."""
    if source is None:
        entries = corpus
        label = "all"
    else:
        entries = [e for e in corpus if e.source == source]
        label = source
    ids = {e.id for e in entries}
    routes = {lab.value for lab in gold if lab.task == "generic_route" and lab.entry_id in ids}
    names = {lab.value for lab in gold if lab.task == "generic_name" and lab.entry_id in ids}
    positives = {class_id: 0 for class_id in BINARY_CLASS_IDS}
    for lab in gold:
        if lab.task in positives and lab.entry_id in ids and lab.value == 1:
            positives[lab.task] += 1
    return CorpusSummary(
        source=label,
        n_entries=len(entries),
        n_unique_routes=len(routes),
        n_unique_generic_names=len(names),
        positives_per_class=positives,
    )


def summarize_by_source(corpus: list[MedEntry], gold: list[GoldLabel]) -> list[CorpusSummary]:
    """One summary per source present in the corpus, sorted by source name."""
    sources = sorted({e.source for e in corpus})
    return [summarize(corpus, gold, source=s) for s in sources]
