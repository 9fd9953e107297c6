import sys
from pathlib import Path

# make the oracle helpers importable as plain modules
sys.path.insert(0, str(Path(__file__).parent))

# one PASS/FAIL line per acceptance criterion, echoed after the test session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
