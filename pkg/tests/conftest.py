"""Shared pytest hooks: the acceptance verdicts are echoed in the terminal summary."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
