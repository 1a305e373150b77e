import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.failed or report.when == "call":
        _results[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, detail = _results[number]
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
