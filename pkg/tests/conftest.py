"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""

import pytest

VERDICTS = []


class Verdicts:
    def record(self, number: int, title: str, passed: bool, detail: str) -> str:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {title}: {detail}"
        VERDICTS.append((number, line))
        print(line)
        return line


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(VERDICTS):
        terminalreporter.write_line(line)
