"""Shared pytest hooks: collect acceptance-check verdicts for the summary."""

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
