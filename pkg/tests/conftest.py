from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qfbsde.games import assemble_game, game_from_expressions  # noqa: E402
from qfbsde.model import from_expressions  # noqa: E402
from qfbsde.pde import GridSpec, solve_backward  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


LQ_PLAYER = dict(actions=1, box=[[-5.0, 5.0]], b=["a1"], r="-0.5*a1^2", a_hat=["clamp(p1, -5, 5)"], g="-0.2*x1^2")


@pytest.fixture(scope="session")
def heat_model():
    return from_expressions(1, 1, 1.0, ["0"], [["1"]], ["0"], ["tanh(x1)"], name="heat-tanh")


@pytest.fixture(scope="session")
def cole_hopf_model():
    return from_expressions(1, 1, 1.0, ["0"], [["1"]], ["0.5*z1_1^2"], ["tanh(x1)"], name="cole-hopf")


@pytest.fixture(scope="session")
def wide_grid():
    return GridSpec(((-8.0, 8.0),), 801)


@pytest.fixture(scope="session")
def heat_field(heat_model, wide_grid):
    return solve_backward(heat_model, wide_grid)


@pytest.fixture(scope="session")
def cole_hopf_field(cole_hopf_model, wide_grid):
    return solve_backward(cole_hopf_model, wide_grid)


@pytest.fixture(scope="session")
def lq_game():
    return game_from_expressions(1, 1.0, [["1"]], [LQ_PLAYER, LQ_PLAYER], name="lq")


@pytest.fixture(scope="session")
def lq_coeffs(lq_game):
    return assemble_game(lq_game)


@pytest.fixture(scope="session")
def lq_field(lq_coeffs):
    return solve_backward(lq_coeffs, GridSpec(((-6.0, 6.0),), 481))
