"""medabstract: few-shot LLM abstraction of raw EHR medication entries with
an evaluation harness and a clinician review loop."""

__version__ = "0.1.0"

from .domain import (
    GoldLabel,
    MedEntry,
    Prediction,
    RunConfig,
    TaskSpec,
    task_registry,
    validate_gold_set,
)

__all__ = [
    "GoldLabel",
    "MedEntry",
    "Prediction",
    "RunConfig",
    "TaskSpec",
    "task_registry",
    "validate_gold_set",
    "__version__",
]
