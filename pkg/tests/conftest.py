import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n, title = marker.args
    prev = _RESULTS.get(n, (title, True, ""))
    ok = prev[1] and not report.failed
    detail = prev[2]
    if report.failed:
        detail = str(report.longrepr).strip().splitlines()[-1][:160]
    _RESULTS[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, detail = _RESULTS[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        if not ok and detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
