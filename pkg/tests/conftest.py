"""Per-criterion pass/fail summary for tests marked ``acceptance``."""

import pytest

_OUTCOMES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, text): numbered acceptance criterion")
    config.stash[_OUTCOMES] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    mark = item.get_closest_marker("acceptance")
    if mark and (report.when == "call" or report.failed or report.skipped):
        number, text = mark.args
        props = dict(item.user_properties)
        prev = item.config.stash[_OUTCOMES].get(number)
        if prev is None or prev[0] == "PASS":
            status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
            item.config.stash[_OUTCOMES][number] = (status, text, props.get("measured", ""))
    return report


def pytest_terminal_summary(terminalreporter, config):
    outcomes = config.stash.get(_OUTCOMES, {})
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        status, text, measured = outcomes[number]
        line = f"[{status}] criterion {number:>2}: {text}"
        terminalreporter.write_line(line + (f"  ({measured})" if measured else ""))
