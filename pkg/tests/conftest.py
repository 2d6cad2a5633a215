"""Acceptance bookkeeping: one PASS/FAIL line per numbered criterion."""

import pytest

_results = {}
_notes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        ok = rep.passed and not hasattr(rep, "wasxfail")
        prev = _results.get(n, (title, True))
        _results[n] = (title, prev[1] and ok)
        for key, value in item.user_properties:
            if key == "measured":
                _notes.setdefault(n, []).append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        title, ok = _results[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if n in _notes:
            line += "  [" + "; ".join(_notes[n]) + "]"
        terminalreporter.write_line(line)
