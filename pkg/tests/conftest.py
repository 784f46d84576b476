import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vocadistill.tokenizer import Vocabulary  # noqa: E402


@pytest.fixture
def example_vocabs():
    """A teacher-like and a much smaller student-like vocabulary over the same words."""
    teacher = Vocabulary.from_tokens(
        ["excit", "##ing", "the", "film", "was", "##s", "e", "##x", "##c", "##i", "##t",
         "##n", "##g", "ex", "##ti", "##ng", "t", "##h", "##e", "f", "##l", "##m", "w", "##a",
         "."])
    student = Vocabulary.from_tokens(
        ["ex", "##c", "##i", "##ti", "##ng", "##t", "the", "f", "##l", "##m", "w", "##a",
         "##s", "."])
    return teacher, student


_criteria: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = f"{marker.args[0]:>2}. {marker.args[1]}"
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or (report.when == "call" and key not in _criteria):
        _criteria[key] = ("FAIL" if failed else "PASS", item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: int(k.split(".")[0])):
        terminalreporter.write_line(f"{_criteria[key][0]}  criterion {key}")
