import time

import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    n, title = marker.args
    entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "detail": ""})
    if report.when == "call":
        entry["seconds"] = report.duration
        entry["detail"] = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.failed or report.skipped:
        entry["ok"] = False
        if report.skipped:
            entry["detail"] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        line = f"criterion {n:>2}  {'PASS' if e['ok'] else 'FAIL'}  {e['title']}  ({e['seconds']:.1f} s)"
        if e["detail"]:
            line += f"  [{e['detail']}]"
        tr.write_line(line)


@pytest.fixture
def timed():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
