import pytest

from aranea.simnet.scenario import load_preset
from aranea.world import World

_criteria: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _criteria[n] = ("PASS" if rep.passed else "FAIL", title, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, secs = _criteria[n]
        terminalreporter.write_line(f"{status}  criterion {n:>2}: {title} ({secs:.1f}s)")


@pytest.fixture
def demo_world():
    return World(load_preset("demo")).start()
