import pytest

from biharm.grid import DomainSpec, Grid


@pytest.fixture(scope="session")
def grid13():
    return Grid(DomainSpec(nodes_per_axis=(13, 13, 13)))


@pytest.fixture(scope="session")
def grid17():
    return Grid(DomainSpec(nodes_per_axis=(17, 17, 17)))


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion; returns the verdict for asserting."""

    def _report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
