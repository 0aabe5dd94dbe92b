import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the pass flag so tests can assert on it."""
    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        CRITERIA_LINES.append(line)
        print(line)
        return ok
    return record


@pytest.fixture
def note():
    """Informational acceptance line (not a criterion)."""
    def record(text):
        CRITERIA_LINES.append(f"info  {text}")
        print(f"info  {text}")
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
