"""Shared test plumbing: the acceptance-criteria report.

Criterion tests append one verdict line each; the lines are echoed in the
terminal summary so a plain ``pytest -v`` run ends with the full scorecard.
"""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append ``criterion N PASS/FAIL: detail`` lines here."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
