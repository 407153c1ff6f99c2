"""Collects the one-line verdict of each acceptance criterion and prints them at the end."""

import pytest

_VERDICTS: dict[int, str] = {}


class Verdict:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title

    def record(self, passed: bool, detail: str) -> bool:
        _VERDICTS[self.number] = f"criterion {self.number} [{'PASS' if passed else 'FAIL'}] {self.title}: {detail}"
        print(_VERDICTS[self.number])
        return passed


@pytest.fixture
def verdict(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    # a test that errors before recording still gets a line
    _VERDICTS[number] = f"criterion {number} [FAIL] {title}: did not finish"
    return Verdict(number, title)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion test")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
