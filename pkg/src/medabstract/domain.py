"""Core vocabulary shared by every other module: medication entries, the
abstraction tasks, gold labels, run configurations, and predictions.

All types here are immutable after construction and safe to share across
threads. The task registry is the single source of truth for which tasks
exist and in what order; it can be re-loaded from an editable config file so
prompt text is tunable without code changes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .errors import ConfigError

# Known source databases. Any other non-empty string is accepted and treated
# as a custom source name.
SOURCE_MIMIC_IV = "mimic_iv"
SOURCE_EICU_CRD = "eicu_crd"

# Task kinds.
KIND_FREE_TEXT_GENERIC_ROUTE = "free_text_generic_route"
KIND_FREE_TEXT_GENERIC_NAME = "free_text_generic_name"
KIND_BINARY = "binary"

# The six binary classes, in registry order.
BINARY_CLASS_IDS = (
    "antibiotic",
    "anticoagulant",
    "electrolytes",
    "iv_fluid",
    "opioid_analgesic",
    "stress_ulcer_prophylaxis",
)

# Human-readable class labels as they appear inside prompts.
CLASS_LABELS = {
    "antibiotic": "antibiotic",
    "anticoagulant": "anticoagulant",
    "electrolytes": "electrolytes",
    "iv_fluid": "IV fluid",
    "opioid_analgesic": "opioid analgesic",
    "stress_ulcer_prophylaxis": "stress ulcer prophylaxis",
}

OUTPUT_FREE_TEXT = "free_text"
OUTPUT_BINARY = "binary"

LabelValue = Union[str, int]


def content_digest(*parts: str) -> str:
    """Stable hex digest of an ordered tuple of strings.

    Unit separator avoids ambiguity between ("a", "bc") and ("ab", "c").
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


@dataclass(frozen=True)
class MedEntry:
    """One deduplicated raw (drug text, route text) pair from an EHR export."""

    id: str
    drug_raw: str
    route_raw: str
    source: str
    frequency: int

    def __post_init__(self) -> None:
        if not self.drug_raw.strip():
            raise ValueError("drug_raw must be non-empty after trimming")
        if self.frequency < 0:
            raise ValueError("frequency must be >= 0")
        if not self.source:
            raise ValueError("source must be non-empty")

    @property
    def pair(self) -> tuple[str, str]:
        return (self.drug_raw, self.route_raw)


def entry_id_for(source: str, drug_raw: str, route_raw: str) -> str:
    """Stable content-hash id so corpora can be re-exported without
    invalidating gold labels."""
    return content_digest("entry", source, drug_raw, route_raw)[:16]


@dataclass(frozen=True)
class TaskSpec:
    """One abstraction task: a free-text extraction or a binary class call.

    ``definition`` is the text inserted into prompts. For binary tasks it is
    the inner clause of the '"X" means "Y"' sentence; for free-text tasks it
    holds the labeling-convention bullet lines.
    """

    kind: str
    definition: str
    class_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in (
            KIND_FREE_TEXT_GENERIC_ROUTE,
            KIND_FREE_TEXT_GENERIC_NAME,
            KIND_BINARY,
        ):
            raise ValueError(f"unknown task kind: {self.kind!r}")
        if self.kind == KIND_BINARY:
            if self.class_id not in BINARY_CLASS_IDS:
                raise ValueError(f"unknown binary class_id: {self.class_id!r}")
            if not self.definition.strip():
                raise ValueError("binary tasks require a non-empty definition")
        elif self.class_id is not None:
            raise ValueError("class_id is only valid for binary tasks")

    @property
    def output_domain(self) -> str:
        return OUTPUT_BINARY if self.kind == KIND_BINARY else OUTPUT_FREE_TEXT

    @property
    def name(self) -> str:
        """Short stable name used in files and on the wire."""
        if self.kind == KIND_BINARY:
            assert self.class_id is not None
            return self.class_id
        if self.kind == KIND_FREE_TEXT_GENERIC_ROUTE:
            return "generic_route"
        return "generic_name"

    @property
    def label(self) -> str:
        """Display label used inside prompt text."""
        if self.kind == KIND_BINARY:
            assert self.class_id is not None
            return CLASS_LABELS[self.class_id]
        return "generic route" if self.kind == KIND_FREE_TEXT_GENERIC_ROUTE else "generic name"


# Editable default definitions. Only the IV-fluid clause is fixed vocabulary;
# the other five are shipped defaults in the same '"X" means "Y"' shape and
# may be overridden via a task registry file.
_DEFAULT_BINARY_DEFINITIONS = {
    "antibiotic": "a medication administered to treat or prevent bacterial infections",
    "anticoagulant": "a medication given to prevent or treat blood clots by reducing the ability of blood to coagulate",
    "electrolytes": "a preparation given to replace or supplement body electrolytes such as potassium, sodium, magnesium, calcium, or phosphate",
    "iv_fluid": "intravenous fluid given for the purpose of volume expansion",
    "opioid_analgesic": "an opioid medication administered to relieve pain",
    "stress_ulcer_prophylaxis": "a medication given to prevent stress-related gastrointestinal mucosal injury and bleeding",
}

_DEFAULT_ROUTE_CONVENTIONS = (
    '- Use the lowercase generic route classification with no abbreviations '
    '(for example "IV" becomes "injectable product" and "PO/NG" becomes "oral product").'
)

_DEFAULT_NAME_CONVENTIONS = "\n".join(
    [
        "- Use the lowercase generic ingredient name.",
        '- Leave out salt names (for example "hydromorphone hydrochloride" becomes "hydromorphone") '
        'unless the active ingredient is shared across multiple salts '
        '(for example "metoprolol tartrate" and "metoprolol succinate").',
        '- Leave out prescription strengths (for example "hydromorphone hydrochloride 1mg" becomes "hydromorphone").',
        '- Keep concentrations for intravenous fluids and dextrose '
        '(for example "normal saline 0.9%" becomes "sodium chloride 9mg/ml" and '
        '"dextrose 50%" becomes "glucose 500 mg/ml").',
        "- Keep all common components of combination products, without valence.",
    ]
)


def task_registry() -> list[TaskSpec]:
    """The eight registered tasks: two free-text extractions first, then the
    six binary classes in fixed order. Deterministic: repeated calls return
    equal lists."""
    tasks = [
        TaskSpec(kind=KIND_FREE_TEXT_GENERIC_ROUTE, definition=_DEFAULT_ROUTE_CONVENTIONS),
        TaskSpec(kind=KIND_FREE_TEXT_GENERIC_NAME, definition=_DEFAULT_NAME_CONVENTIONS),
    ]
    for class_id in BINARY_CLASS_IDS:
        tasks.append(
            TaskSpec(
                kind=KIND_BINARY,
                class_id=class_id,
                definition=_DEFAULT_BINARY_DEFINITIONS[class_id],
            )
        )
    return tasks


def registry_by_name(tasks: list[TaskSpec]) -> dict[str, TaskSpec]:
    return {t.name: t for t in tasks}


def save_task_registry(tasks: list[TaskSpec], path: Path) -> None:
    """Serialize the registry as a JSON config file, one record per task."""
    records = []
    for t in tasks:
        rec: dict[str, object] = {"kind": t.kind, "definition": t.definition}
        if t.class_id is not None:
            rec["class_id"] = t.class_id
        records.append(rec)
    path.write_text(
        json.dumps({"tasks": records}, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def load_task_registry(path: Path) -> list[TaskSpec]:
    """Load a task registry override file. The file must still describe a
    full registry: exactly 8 tasks, 2 free-text + 6 binary."""
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read task registry {path}: {exc}") from exc
    records = raw.get("tasks")
    if not isinstance(records, list):
        raise ConfigError(f"task registry {path} must contain a 'tasks' list")
    tasks: list[TaskSpec] = []
    for i, rec in enumerate(records):
        try:
            tasks.append(
                TaskSpec(
                    kind=rec["kind"],
                    definition=rec.get("definition", ""),
                    class_id=rec.get("class_id"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"task registry {path} record {i}: {exc}") from exc
    _check_registry_shape(tasks, path)
    return tasks


def _check_registry_shape(tasks: list[TaskSpec], path: Path) -> None:
    if len(tasks) != 8:
        raise ConfigError(f"task registry {path} must define exactly 8 tasks, got {len(tasks)}")
    kinds = [t.kind for t in tasks]
    if kinds.count(KIND_BINARY) != 6:
        raise ConfigError(f"task registry {path} must define 6 binary tasks")
    class_ids = sorted(t.class_id for t in tasks if t.kind == KIND_BINARY)
    if class_ids != sorted(BINARY_CLASS_IDS):
        raise ConfigError(f"task registry {path} binary class ids must be {BINARY_CLASS_IDS}")
    names = [t.name for t in tasks]
    if len(set(names)) != 8:
        raise ConfigError(f"task registry {path} contains duplicate tasks")


@dataclass(frozen=True)
class GoldLabel:
    """Reference label for one (entry, task). Free-text values are stored
    lowercase and trimmed; binary values are 0 or 1."""

    entry_id: str
    task: str
    value: LabelValue

    def __post_init__(self) -> None:
        if isinstance(self.value, bool):
            raise ValueError("binary gold values must be int 0/1, not bool")


@dataclass(frozen=True)
class RunConfig:
    """Everything that identifies one inference configuration."""

    model_id: str
    provider_kind: str
    temperature: float
    shot_count: int
    max_retries: int = 2
    concurrency_cap: int = 4
    cache_enabled: bool = True

    # Temperatures explored in grid mode.
    TEMPERATURE_GRID = (0.0, 0.2, 0.5)
    SHOT_RANGE = (0, 10)

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be in [0, 1]")
        lo, hi = self.SHOT_RANGE
        if not lo <= self.shot_count <= hi:
            raise ValueError(f"shot_count must be in [{lo}, {hi}]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.concurrency_cap < 1:
            raise ValueError("concurrency_cap must be >= 1")

    def digest(self) -> str:
        return content_digest(
            "runconfig",
            self.model_id,
            self.provider_kind,
            repr(self.temperature),
            str(self.shot_count),
            str(self.max_retries),
        )


@dataclass(frozen=True)
class Prediction:
    """Model output for one (entry, task) under one configuration.

    ``raw_output`` is stored verbatim, untouched by any trimming; ``parsed``
    is present exactly when ``valid`` is true.
    """

    entry_id: str
    task: str
    config_digest: str
    raw_output: str
    parsed: Optional[LabelValue]
    valid: bool
    latency_ms: int
    attempt_count: int = 1
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if self.valid != (self.parsed is not None):
            raise ValueError("valid must hold exactly when parsed is present")
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        if self.attempt_count < 1:
            raise ValueError("attempt_count must be >= 1")


@dataclass
class GoldValidationReport:
    """Findings from checking a gold set against a corpus and the registry.
    Empty report means the set is usable."""

    dangling_entry_ids: list[str] = field(default_factory=list)
    duplicate_pairs: list[tuple[str, str]] = field(default_factory=list)
    malformed_values: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.dangling_entry_ids or self.duplicate_pairs or self.malformed_values)

    def to_dict(self) -> dict[str, object]:
        return {
            "ok": self.ok,
            "dangling_entry_ids": list(self.dangling_entry_ids),
            "duplicate_pairs": [list(p) for p in self.duplicate_pairs],
            "malformed_values": list(self.malformed_values),
        }


def validate_gold_set(
    labels: list[GoldLabel],
    corpus: list[MedEntry],
    tasks: Optional[list[TaskSpec]] = None,
) -> GoldValidationReport:
    """Report dangling entry ids, duplicate (entry, task) pairs, and
    malformed values. Never raises; findings are data, not exceptions."""
    tasks = tasks if tasks is not None else task_registry()
    by_name = registry_by_name(tasks)
    known_ids = {e.id for e in corpus}
    report = GoldValidationReport()
    seen: set[tuple[str, str]] = set()
    for lab in labels:
        if lab.entry_id not in known_ids:
            report.dangling_entry_ids.append(lab.entry_id)
        key = (lab.entry_id, lab.task)
        if key in seen:
            report.duplicate_pairs.append(key)
        seen.add(key)
        task = by_name.get(lab.task)
        if task is None:
            report.malformed_values.append(f"{lab.entry_id}/{lab.task}: unknown task")
            continue
        if task.output_domain == OUTPUT_BINARY:
            if not isinstance(lab.value, int) or lab.value not in (0, 1):
                report.malformed_values.append(
                    f"{lab.entry_id}/{lab.task}: binary value must be 0 or 1, got {lab.value!r}"
                )
        else:
            if not isinstance(lab.value, str):
                report.malformed_values.append(
                    f"{lab.entry_id}/{lab.task}: free-text value must be a string"
                )
            elif not lab.value or lab.value != lab.value.strip().lower():
                report.malformed_values.append(
                    f"{lab.entry_id}/{lab.task}: free-text value must be non-empty, "
                    f"lowercase and trimmed, got {lab.value!r}"
                )
    return report
