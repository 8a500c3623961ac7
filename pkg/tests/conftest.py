import numpy as np
import pytest


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (x is modified and restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each at the end of the run
CRITERIA: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    CRITERIA[number] = (passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, title, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
