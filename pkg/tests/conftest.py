"""Shared fixtures; collects acceptance verdict lines for the run summary."""

import pytest

_verdicts: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert."""

    def _record(name: str, passed: bool, detail: str = "") -> None:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {name}" + (f" ({detail})" if detail else "")
        _verdicts.append(line)
        assert passed, line

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _verdicts:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
