"""Per-criterion pass/fail report for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n, "title")`` are grouped by ``n``; the
terminal summary prints one line per criterion (FAIL if any of its tests failed).
"""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": 0, "failed": 0, "skipped": 0, "seconds": 0.0, "notes": []})
    if report.when == "call" or report.outcome != "passed":
        entry["seconds"] += report.duration
        if report.outcome == "skipped" and report.when != "teardown":
            entry["skipped"] += 1
        elif report.outcome == "failed":
            entry["failed"] += 1
            entry["notes"].append(item.name)
        elif report.when == "call":
            entry["passed"] += 1
    for key, value in item.user_properties:
        if key == "measured" and value not in entry["notes"]:
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = "FAIL" if e["failed"] else ("SKIP" if not e["passed"] else "PASS")
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(
            f"criterion {number}: {status}  {e['title']}  ({e['passed']} passed, {e['failed']} failed, {e['seconds']:.1f}s){notes}"
        )
