"""Prints the acceptance-criteria scoreboard after the run."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(mod.RESULTS):
        name, status = mod.RESULTS[num]
        terminalreporter.write_line(f"ACCEPTANCE {num} ({name}): {status}")
