"""Shared pytest plumbing: the acceptance suite's end-of-run report."""

_ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE_LINES.append((number, "PASS" if passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, status, detail in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {status} - {detail}")
