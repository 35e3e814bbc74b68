from __future__ import annotations

import pytest

_criteria: dict[int, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance check")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the criterion report."""

    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        notes = "; ".join(v for k, v in item.user_properties if k == "detail")
        _criteria[number] = (title, status, rep.duration, notes)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, secs, notes = _criteria[number]
        line = f"criterion {number:2d} {status}  {title} ({secs:.1f} s)"
        if notes:
            line += f"  [{notes}]"
        terminalreporter.write_line(line)
