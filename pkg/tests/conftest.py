from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# Class histogram of the bundled 200-row UNSW-NB15-layout fixture.
FIXTURE_HISTOGRAM = {
    "Normal": 80, "Analysis": 3, "Backdoor": 3, "DoS": 12, "Exploits": 30,
    "Fuzzers": 18, "Generic": 40, "Reconnaissance": 10, "Shellcode": 2, "Worms": 2,
}


@pytest.fixture
def fixture_csv() -> Path:
    return FIXTURES / "unsw_200.csv"


# One line per acceptance criterion, collected by tests/test_acceptance.py and
# echoed at the end of the run whether or not output capture is on.
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
