VERDICT_LINES = []


def pytest_terminal_summary(terminalreporter):
    if VERDICT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICT_LINES):
            terminalreporter.write_line(line)
