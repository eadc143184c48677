import pytest

from dnescope.censorsim.world import standard_world
from dnescope.model import RunConfig

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def world():
    return standard_world()


@pytest.fixture
def cfg():
    return RunConfig(parallelism=1)


@pytest.fixture
def verdict_line(capsys):
    """Print one PASS/FAIL line straight to the terminal and keep it for the summary."""
    def emit(criterion: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
