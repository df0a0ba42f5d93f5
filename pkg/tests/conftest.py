"""Per-criterion acceptance summary.

Tests marked ``@pytest.mark.criterion(n, "title")`` are grouped by ``n``; a
criterion passes when every one of its tests passes.  Tests may attach
measurements through the ``acceptance_note`` fixture.
"""
from collections import defaultdict

import pytest

_meta: dict[int, str] = {}
_items: dict[str, int] = {}
_outcomes: dict[int, list[str]] = defaultdict(list)
_notes: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test verifies")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n = m.args[0]
            _items[item.nodeid] = n
            if len(m.args) > 1:
                _meta[n] = m.args[1]


def pytest_runtest_logreport(report):
    n = _items.get(report.nodeid)
    if n is None:
        return
    if report.failed:
        _outcomes[n].append("fail")
    elif report.when == "call":
        _outcomes[n].append("skip" if report.skipped else "pass")
    elif report.skipped:
        _outcomes[n].append("skip")


@pytest.fixture
def acceptance_note(request):
    m = request.node.get_closest_marker("criterion")

    def note(text):
        _notes[m.args[0]].append(text)
    return note


def pytest_terminal_summary(terminalreporter):
    if not _items:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(set(_items.values())):
        results = _outcomes.get(n, [])
        if not results:
            status = "NOT RUN"
        elif "fail" in results:
            status = "FAIL"
        elif "pass" in results and "skip" not in results:
            status = "PASS"
        else:
            status = "INCOMPLETE"
        notes = "; ".join(_notes.get(n, []))
        tr.write_line(f"criterion {n} {status}: {_meta.get(n, '')}" + (f" [{notes}]" if notes else ""))
