"""Suite-level wiring: echo acceptance-criterion verdicts after the run.

The acceptance tests collect one PASS/FAIL line per criterion in a module
list; printing them from a terminal-summary hook keeps the lines visible
under normal output capturing.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
