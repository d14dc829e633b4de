"""Shared pytest hooks: one PASS/FAIL line per acceptance criterion at the end of the run."""

from collections import OrderedDict

import pytest

_OUTCOMES = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        num, title = marker.args
        entry = _OUTCOMES.setdefault(num, {"title": title, "ok": True, "details": []})
        entry["ok"] &= rep.passed
        details = [v for k, v in item.user_properties if k == "detail"]
        entry["details"] += details or ([] if rep.passed else [f"{item.name}: {rep.outcome}"])


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_OUTCOMES):
        e = _OUTCOMES[num]
        line = f"[{'PASS' if e['ok'] else 'FAIL'}] {num:2d}. {e['title']}"
        if e["details"]:
            line += "  |  " + "; ".join(e["details"])
        tr.write_line(line)
