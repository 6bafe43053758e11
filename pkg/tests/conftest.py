"""Shared test plumbing: the acceptance-criteria summary block."""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Collect one PASS/FAIL line per acceptance criterion for the run summary."""

    def rec(name, ok, detail, gate=True):
        status = "PASS" if ok else ("FAIL" if gate else "INFO")
        line = f"{name}: {status} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if gate:
            assert ok, line

    return rec


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
