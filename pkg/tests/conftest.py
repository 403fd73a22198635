from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthdata import build_dataset, small_dataset  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def dataset():
    """The 398-entry two-source corpus with full gold labels."""
    return build_dataset()


@pytest.fixture()
def tiny():
    """20 single-source entries with full gold labels."""
    return small_dataset()
