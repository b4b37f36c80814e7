"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_RESULTS = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        if report.failed or n not in _RESULTS:
            _RESULTS[n] = ("FAIL" if report.failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({detail})" if detail else ""))
