import numpy as np
import pytest

from attnfuse import graph

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"AC{key:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    # 0 -> 1, 2 -> 1, 1 -> 2, plus a self-loop on 0
    return graph.from_coo(3, [0, 2, 1, 0], [1, 1, 2, 0])


@pytest.fixture
def small_random():
    return graph.gen_random(40, 4.0, seed=7)
