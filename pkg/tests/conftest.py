"""Shared pytest configuration: acceptance-criterion result reporting."""

from contextlib import contextmanager

_CRITERION_RESULTS: list[tuple[int, str, str, str]] = []


def record_criterion(number: int, title: str, status: str, detail: str) -> None:
    _CRITERION_RESULTS.append((number, title, status, detail))
    print(f"ACCEPTANCE criterion {number} [{status}] {title}: {detail}")


@contextmanager
def criterion(number: int, title: str):
    """Record one pass/fail line per criterion, even when the assert trips."""
    details: list[str] = []
    try:
        yield details
    except BaseException as exc:
        record_criterion(number, title, "FAIL", "; ".join(details) or str(exc))
        raise
    record_criterion(number, title, "PASS", "; ".join(details))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_CRITERION_RESULTS):
        terminalreporter.write_line(f"criterion {number} [{status}] {title}: {detail}")
