"""Repeats the acceptance verdict lines after the run summary.

The acceptance tests print one "acceptance i/8 PASS|FAIL ..." line each;
default output capture would swallow them for passing tests, so this hook
pulls them out of the captured reports and writes them where they are
always visible.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed"):
        for report in terminalreporter.stats.get(outcome, []):
            if report.when != "call" or "test_acceptance" not in report.nodeid:
                continue
            lines += [
                ln for ln in report.capstdout.splitlines() if ln.startswith("acceptance ")
            ]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
