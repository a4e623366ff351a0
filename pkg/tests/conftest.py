"""Shared pytest plumbing: the acceptance-criteria summary section.

Acceptance tests record one line per criterion; the terminal summary prints
them after the run so `pytest -v` output always carries an explicit
pass/fail verdict for every criterion, tolerances included.
"""

_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)
