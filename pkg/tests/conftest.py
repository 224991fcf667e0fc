import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number, title = mark.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _RESULTS[number] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        line = f"{'PASS' if passed else 'FAIL'}  [{number}] {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
