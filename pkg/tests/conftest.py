import numpy as np
import pytest

from adura import tensor as T


def central_diff(fn, t, h=1e-5):
    """Central-difference gradient of the scalar ``fn()`` with respect to ``t``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_grads(fn, inputs, weights=None, tol=1e-4, seed=0):
    """Compare backward-pass gradients of ``sum(fn() * weights)`` with central differences."""
    if weights is None:
        weights = np.random.default_rng(seed).normal(size=fn().shape)

    def scalar():
        return T.sum_(fn() * weights)

    for t in inputs:
        t.grad = None
    scalar().backward()
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        err = rel_err(analytic, central_diff(scalar, t))
        assert err < tol, f"gradient mismatch for input of shape {t.shape}: rel err {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
