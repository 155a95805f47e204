import pytest

_RESULTS = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details = []

    def note(self, msg: str) -> None:
        self.details.append(msg)


@pytest.fixture
def criterion(request):
    """Register an acceptance criterion; its pass/fail line is printed in the session summary."""
    marker = request.node.get_closest_marker("criterion")
    crit = _Criterion(*marker.args)
    _RESULTS[crit.number] = (crit, None)
    yield crit


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion under test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number = marker.args[0]
    crit = _RESULTS.get(number, (_Criterion(*marker.args), None))[0]
    _RESULTS[number] = (crit, rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        crit, passed = _RESULTS[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status}  {crit.title}"
        if crit.details:
            line += "  [" + "; ".join(crit.details) + "]"
        terminalreporter.write_line(line)
