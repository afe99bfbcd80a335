"""Shared pytest plumbing.

The acceptance suite records one verdict line per criterion; echo them in
the terminal summary so they are visible even when output capture is on.
"""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items()
                if name.rpartition(".")[2] == "test_acceptance"), None)
    lines = getattr(mod, "VERDICT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
