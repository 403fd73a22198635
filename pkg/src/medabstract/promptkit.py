"""Deterministic prompt rendering.

A prompt is one contiguous user message: role preamble, the task instruction
over the query pair presented as ["drugname", "route"], a class definition
clause (binary) or labeling-convention bullets (free-text), one example
sentence per shot, and a strict output instruction. Identical inputs always
yield identical bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import csv

from .domain import KIND_BINARY, KIND_FREE_TEXT_GENERIC_ROUTE, MedEntry, TaskSpec
from .errors import DataError

PREAMBLE = (
    "You are a well trained clinician doing data cleaning and harmonization. "
    "You are given a raw drug name and administration route out of the EHR data below, "
    "within square brackets such as [drugname, route]."
)

DEFAULT_PROMPT_CHAR_BUDGET = 10_000

SHOT_POOL_COLUMNS = ["task", "drug", "route", "expected_output"]


class InsufficientShotPoolError(DataError):
    """Requested more shots than the pool can provide after exclusion."""


class PromptBudgetError(DataError):
    """Rendered prompt exceeds the configured character budget."""


@dataclass(frozen=True)
class ShotExample:
    """One worked input -> output example embedded into prompts."""

    drug_raw: str
    route_raw: str
    expected_output: str

    @property
    def pair(self) -> tuple[str, str]:
        return (self.drug_raw, self.route_raw)


@dataclass(frozen=True)
class BuiltPrompt:
    task: str
    query_entry_id: str
    text: str
    shot_count: int
    digest: str


def select_shots(pool: list[ShotExample], n: int, exclude: MedEntry) -> list[ShotExample]:
    """First n pool examples in stored order, skipping any whose (drug, route)
    pair equals the query entry's pair. Raises instead of silently returning
    fewer than n shots."""
    if n < 0:
        raise ValueError("shot count must be >= 0")
    available = [s for s in pool if s.pair != exclude.pair]
    if n > len(available):
        raise InsufficientShotPoolError(
            f"need {n} shots for entry {exclude.id} but only {len(available)} "
            f"available after excluding the query pair"
        )
    return available[:n]


def _bracket_pair(drug: str, route: str) -> str:
    return f'["{drug}", "{route}"]'


def _example_clause(shot: ShotExample) -> str:
    return (
        f'Consider the following example: An input drug name "{shot.drug_raw}" '
        f'and route "{shot.route_raw}" would be classified as "{shot.expected_output}".'
    )


def build_prompt(
    task: TaskSpec,
    entry: MedEntry,
    shots: list[ShotExample],
    max_chars: int = DEFAULT_PROMPT_CHAR_BUDGET,
) -> BuiltPrompt:
    """Render the full prompt for one (task, entry, shots) triple."""
    pair = _bracket_pair(entry.drug_raw, entry.route_raw)
    examples = [_example_clause(s) for s in shots]
    if task.kind == KIND_BINARY:
        instruction = f'Please output "1" if {pair} is classified as "{task.label}", otherwise "0".'
        definition_clause = f'"{task.label}" means "{task.definition}".'
        strict = 'Please output nothing more than "1" or "0".'
        text = " ".join([PREAMBLE, instruction, definition_clause, *examples, strict])
    else:
        what = "generic route" if task.kind == KIND_FREE_TEXT_GENERIC_ROUTE else "generic name"
        instruction = f"Please output only the {what} of {pair} in lowercase, nothing else."
        strict = f"Please output nothing more than the lowercase {what}."
        tail = " ".join([*examples, strict])
        text = f"{PREAMBLE} {instruction}\nFollow these conventions:\n{task.definition}\n{tail}"
    if len(text) > max_chars:
        raise PromptBudgetError(
            f"prompt for entry {entry.id} task {task.name} is {len(text)} chars, "
            f"budget is {max_chars}"
        )
    return BuiltPrompt(
        task=task.name,
        query_entry_id=entry.id,
        text=text,
        shot_count=len(shots),
        digest=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )


def load_shot_pool(path: Path) -> dict[str, list[ShotExample]]:
    """Read a shot pool CSV (task, drug, route, expected_output) into
    per-task lists preserving file order."""
    pools: dict[str, list[ShotExample]] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if header is None or [c for c in SHOT_POOL_COLUMNS if c not in header]:
                raise DataError(
                    f"shot pool {path} must have header columns {SHOT_POOL_COLUMNS}, got {header}"
                )
            for line_no, row in enumerate(reader, start=2):
                task = (row.get("task") or "").strip()
                drug = (row.get("drug") or "").strip()
                route = (row.get("route") or "").strip()
                output = (row.get("expected_output") or "").strip()
                if not task or not drug or not output:
                    raise DataError(f"shot pool {path} line {line_no}: incomplete record")
                pools.setdefault(task, []).append(
                    ShotExample(drug_raw=drug, route_raw=route, expected_output=output)
                )
    except OSError as exc:
        raise DataError(f"cannot read shot pool {path}: {exc}") from exc
    return pools


def save_shot_pool(pools: dict[str, list[ShotExample]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(SHOT_POOL_COLUMNS)
        for task in pools:
            for shot in pools[task]:
                writer.writerow([task, shot.drug_raw, shot.route_raw, shot.expected_output])


def append_shots(
    path: Path,
    task: str,
    shots: list[ShotExample],
) -> int:
    """Append novel examples for one task to the pool file, deduplicated by
    (drug, route) pair against the existing pool for that task. Existing
    entries are never touched or reordered, so prompts built at prior shot
    counts stay byte-identical. Returns how many were appended."""
    pools = load_shot_pool(path) if path.exists() else {}
    existing = {s.pair for s in pools.get(task, [])}
    novel: list[ShotExample] = []
    for shot in shots:
        if shot.pair not in existing:
            novel.append(shot)
            existing.add(shot.pair)
    if not novel:
        return 0
    write_header = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        if write_header:
            writer.writerow(SHOT_POOL_COLUMNS)
        for shot in novel:
            writer.writerow([task, shot.drug_raw, shot.route_raw, shot.expected_output])
    return len(novel)
