"""Shared pytest hooks: one summary line per acceptance criterion."""

import re

CRITERIA = {
    1: "robustness-score arithmetic (CE / mCE)",
    2: "analytic gradients vs central differences",
    3: "zero-loss identities and weighted composition",
    4: "rigid-transform geometry invariants",
    5: "corruption operator contracts",
    6: "teacher densification and semantic painting",
    7: "detection metrics vs independent oracles",
    8: "end-to-end robustness benchmark",
    9: "attention fusion weights",
}

_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_outcomes = {}


def pytest_runtest_logreport(report):
    match = _PATTERN.search(report.nodeid)
    if not match:
        return
    num = int(match.group(1))
    if report.when == "call":
        _outcomes[num] = report.outcome
    elif report.outcome != "passed":
        # Setup errors and skips must not read as green.
        _outcomes[num] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        if num in _outcomes:
            status = "PASS" if _outcomes[num] == "passed" else "FAIL"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {num}: {status} - {CRITERIA[num]}")
    for line in getattr(config, "_acceptance_notes", []):
        terminalreporter.write_line(line)
