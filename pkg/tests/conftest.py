"""Shared pytest hooks: surface acceptance verdicts past output capture."""

ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_VERDICTS:
        return
    terminalreporter.write_line("")
    for line in ACCEPTANCE_VERDICTS:
        terminalreporter.write_line(line)
