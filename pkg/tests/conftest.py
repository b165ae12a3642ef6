import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gdfo.bench.config import ExperimentConfig  # noqa: E402
from gdfo.bench.experiment import prepare_seed  # noqa: E402


@pytest.fixture(scope="session")
def ref_cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def seed0(ref_cfg):
    """Task, teacher and distilled students of the reference config at seed 0 (cached per process)."""
    return prepare_seed(ref_cfg, 0)


_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""

    def record(n, ok, detail):
        request.config.stash[_CRITERIA].append((n, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    rows = sorted(config.stash.get(_CRITERIA, []))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in rows:
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
