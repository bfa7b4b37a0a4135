"""Shared pytest wiring: after a run that touched the acceptance suite,
print one verdict line per criterion."""

import re

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when in ("setup", "call") and report.outcome != "passed":
        _ACCEPTANCE[report.nodeid] = "FAIL"
    elif report.when == "call":
        _ACCEPTANCE.setdefault(report.nodeid, "PASS")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE):
        m = re.search(r"test_criterion_(\d+)_(\w+)", nodeid)
        if not m:
            continue
        label = m.group(2).replace("_", " ")
        terminalreporter.write_line(
            f"criterion {int(m.group(1)):02d} ({label}): {_ACCEPTANCE[nodeid]}")
