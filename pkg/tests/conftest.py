"""Shared pytest configuration; prints one PASS/FAIL line per acceptance criterion."""

from collections import OrderedDict

import pytest

_criteria = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            num, title = mark.args
            _criteria.setdefault(num, {"title": title, "outcomes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _criteria[mark.args[0]]["outcomes"].append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        c = _criteria[num]
        if not c["outcomes"]:
            status = "NOT RUN"
        elif all(o == "passed" for o in c["outcomes"]):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"{status} criterion {num}: {c['title']}")
