"""Per-criterion pass/fail reporting for the acceptance suite."""

import collections

_TITLES = {}
_OUTCOMES = collections.defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _TITLES[number] = title
            item.user_properties.append(("criterion", number))


def pytest_runtest_logreport(report):
    for key, value in report.user_properties:
        if key != "criterion":
            continue
        if report.when == "call" or report.outcome == "failed":
            _OUTCOMES[value].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_TITLES):
        outcomes = _OUTCOMES.get(number, [])
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} [{status}] {_TITLES[number]}")
