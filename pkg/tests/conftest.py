import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion: ``criterion("AC-1", ok, "detail")``."""

    def record(name, ok, detail=""):
        _RESULTS[name] = (bool(ok), detail)
        request.node.user_properties.append((name, detail))
        return ok

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    name = marker.args[0]
    if report.skipped:
        _RESULTS.setdefault(name, (None, "skipped"))
    elif report.failed and (name not in _RESULTS or _RESULTS[name][0]):
        _RESULTS[name] = (False, _RESULTS.get(name, (None, "test errored"))[1])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by the test")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS, key=lambda s: int(s.split("-")[1])):
        ok, detail = _RESULTS[name]
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"{name:6s} {status}  {detail}")
