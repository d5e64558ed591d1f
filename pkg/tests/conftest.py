from __future__ import annotations

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Print and keep one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {name}: {detail}"
        print(line)
        _VERDICTS.append(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
