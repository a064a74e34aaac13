"""Per-criterion pass/fail summary for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n)`` are grouped by ``n``; a criterion
passes when every one of its tests passes. Details recorded with
``record_property("detail", ...)`` are echoed next to the verdict.
"""

import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    entry = _results.setdefault(n, {"ok": True, "details": [], "ran": False})
    if report.when == "call" or report.failed:
        entry["ran"] = True
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
    if report.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]
        if report.failed:
            entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        verdict = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}".rstrip())
