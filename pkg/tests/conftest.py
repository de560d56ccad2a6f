"""Per-criterion PASS/FAIL summary for the acceptance suite."""
from collections import defaultdict

import pytest

TITLES = {
    1: "loss correctness",
    2: "temperature invariance",
    3: "patch pipeline",
    4: "mix augmentations",
    5: "log-mel shape",
    6: "pilot distillation",
    7: "signal-degradation ordering",
    8: "compression mechanics",
    9: "CKA",
    10: "GIST",
    11: "teacher immutability",
}
_outcomes: dict[int, list[str]] = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failing fixture fails the criterion too
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[marker.args[0]].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_outcomes):
        verdict = "PASS" if all(o == "passed" for o in _outcomes[crit]) else "FAIL"
        terminalreporter.write_line(f"criterion {crit:2d} ({TITLES.get(crit, '?')}): {verdict}")
