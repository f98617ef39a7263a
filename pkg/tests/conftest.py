import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def accept():
    """Record one pass/fail line per acceptance criterion and return the verdict."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
