import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stqrng.core import ProtocolParams, honest_score_distribution, table1_params  # noqa: E402
from stqrng.sdp.guessing import solve_pguess  # noqa: E402
from stqrng.sdp.moments import build_moment_problem  # noqa: E402


@pytest.fixture(scope="session")
def table1() -> ProtocolParams:
    return table1_params()


@pytest.fixture(scope="session")
def level2_problem(table1):
    return build_moment_problem(table1, level=2)


@pytest.fixture(scope="session")
def honest_level2(table1, level2_problem):
    """Level-2 relaxation at the honest statistics of the reference parameter set."""
    return solve_pguess(honest_score_distribution(table1), level2_problem)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"acceptance {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
