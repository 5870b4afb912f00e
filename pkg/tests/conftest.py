import numpy as np
import pytest

from perchom.env import Environment, LatticeBox, generate_environment


def unit_env(side: int, d: int = 2) -> Environment:
    return generate_environment(LatticeBox.centered(side, d), 1.0)


def closed_env(side: int, d: int = 2) -> Environment:
    box = LatticeBox.centered(side, d)
    return Environment.from_arrays(box, [np.zeros(box.bond_shape(k)) for k in range(d)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance criterion outcomes, filled by test_acceptance and printed at the end
CRITERIA = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = (ok, detail)
    print(f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
