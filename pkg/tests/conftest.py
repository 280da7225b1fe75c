"""Acceptance reporting: one PASS/FAIL line per criterion in the summary."""
import re

import pytest

_DETAILS: dict[int, str] = {}
_OUTCOMES: dict[int, str] = {}
_TITLES: dict[int, str] = {}
_NODE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


@pytest.fixture
def acceptance(request):
    """``acceptance(number, title, detail)`` attaches a summary to the
    criterion; the verdict comes from the test outcome itself."""

    def record(number: int, title: str, detail: str):
        _TITLES[number] = title
        _DETAILS[number] = detail
        print(f"criterion {number} ({title}): {detail}")

    return record


def pytest_runtest_logreport(report):
    m = _NODE.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        if _OUTCOMES.get(n) != "FAIL":
            _OUTCOMES[n] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_OUTCOMES):
        title = _TITLES.get(n, "")
        detail = _DETAILS.get(n, "no result recorded")
        terminalreporter.write_line(f"criterion {n} [{title}]: {_OUTCOMES[n]} -- {detail}")
