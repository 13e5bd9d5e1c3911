"""Shared pytest wiring: the acceptance summary block.

Each test in test_acceptance.py is named test_criterion_<NN>_<label>; after
the run one PASS/FAIL line per criterion is printed, so the verdicts are
visible even with output capture on.
"""

import re

_PATTERN = re.compile(r"test_criterion_(\d+)_([a-z0-9_]+)")
_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = _PATTERN.search(report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    label = match.group(2).replace("_", " ")
    if report.when == "call":
        outcome = "PASS" if report.passed else "FAIL"
        _RESULTS[number] = (label, outcome)
    elif report.when == "setup" and (report.failed or report.skipped):
        _RESULTS[number] = (label, "SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        label, outcome = _RESULTS[number]
        terminalreporter.write_line(
            f"[acceptance] criterion {number:2d} ({label}): {outcome}"
        )
