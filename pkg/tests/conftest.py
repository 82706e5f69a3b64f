import pytest

_details = {}
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.fixture
def acceptance(request):
    """``acceptance(detail)`` attaches a one-line summary to the test's criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(detail: str):
        _details[n] = detail
    return record


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker and (report.when == "call" or report.failed):
        n = marker.args[0]
        if report.failed:
            _outcomes[n] = "FAIL"
            if n not in _details:
                _details[n] = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        elif report.when == "call":
            _outcomes.setdefault(n, "PASS")
    return report


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        terminalreporter.write_line(f"{_outcomes[n]} criterion {n:2d}: {_details.get(n, '')}")
