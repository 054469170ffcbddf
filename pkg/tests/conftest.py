import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    prev = _criteria.get(n, (title, "PASS"))[1]
    if rep.failed:
        status = "FAIL"
    elif rep.skipped and rep.when != "teardown":
        status = "SKIP"
    else:
        status = prev
    if rep.when == "call" or rep.failed or rep.skipped:
        _criteria[n] = (title, status if prev == "PASS" else prev)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}")
