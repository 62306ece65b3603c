import numpy as np
import pytest

from crafem.mesh import MeshForest, refine, uniform_refine
from crafem.problems import get_problem


def square_forest() -> MeshForest:
    return get_problem("square-poisson-f1").forest()


def lshape_forest() -> MeshForest:
    return get_problem("lshape-poisson-f1").forest()


def unit_triangle_forest() -> MeshForest:
    """Single triangle (0,0),(1,0),(0,1) with the hypotenuse as refinement edge."""
    return MeshForest([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])


def random_refinement(T, seed: int, steps: int = 3, marks: int = 3):
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        keys = T.side_keys()
        pick = rng.choice(len(keys), size=min(marks, len(keys)), replace=False)
        T = refine(T, [keys[i] for i in pick])
    return T


@pytest.fixture
def square():
    return square_forest()


@pytest.fixture
def lshape():
    return lshape_forest()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -----------------------------------------------------------
ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
