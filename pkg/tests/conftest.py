"""Session hooks: count probability-volume invariant checks, run the
acceptance module last and echo its PASS/FAIL lines in the summary."""

import pytest

from contrastmvs.matching import CostVolumeBundle

CHECKS = {"passed": 0, "failed": 0}
ACCEPTANCE_LINES: list[str] = []

_original_check = CostVolumeBundle.check


def _counting_check(self, tol=1e-9):
    try:
        _original_check(self, tol)
    except Exception:
        CHECKS["failed"] += 1
        raise
    CHECKS["passed"] += 1


CostVolumeBundle.check = _counting_check


def pytest_collection_modifyitems(session, config, items):
    items.sort(key=lambda item: item.nodeid.startswith("tests/test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(capsys):
    """Record one PASS/FAIL line; call with (name, ok, detail)."""
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record
