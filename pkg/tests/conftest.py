import os
from pathlib import Path

import numpy as np
import pytest

from deeppseudo.tensor import default_dtype

DATA = Path(__file__).parent / "data"
TOY_CORPUS = DATA / "toy_corpus"
REFERENCE_ENV = "DEEPPSEUDO_REFERENCE_CORPUS"


def reference_corpus_dir() -> Path | None:
    """Directory with the full line-aligned Django corpus, if one is configured."""
    raw = os.environ.get(REFERENCE_ENV)
    if raw and Path(raw).is_dir():
        return Path(raw)
    local = DATA / "django"
    return local if local.is_dir() else None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def toy_corpus_dir() -> Path:
    return TOY_CORPUS


# acceptance results are collected by tests/test_acceptance.py and echoed here
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, line in ACCEPTANCE.items():
        terminalreporter.write_line(f"{name}: {line}")
