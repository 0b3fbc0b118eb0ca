import numpy as np
import pytest

# one line per acceptance criterion, filled by tests/test_acceptance.py
VERDICTS = []


def record_verdict(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}"
    if detail:
        line += f" ({detail})"
    VERDICTS.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
