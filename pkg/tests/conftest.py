import numpy as np
import pytest

from namest.autodiff import Tensor


def numeric_grad(fn, array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``array`` (modified in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = array[i]
        array[i] = old + h
        up = fn()
        array[i] = old - h
        down = fn()
        array[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_grads(build, tensors: list[Tensor], tol: float = 1e-6) -> None:
    """Compare autodiff gradients of the scalar ``build()`` with central differences."""
    for t in tensors:
        t.grad = None
    out = build()
    out.backward()
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data)
        assert t.grad is not None
        assert rel_err(t.grad, num) < tol, (t.grad, num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict; all of them are printed at the end of the session."""
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
