import numpy as np
import pytest

from deepcount import tensor as T


def numeric_grad(f, arr, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build_loss, tensors, eps=1e-6):
    """Worst relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    T.backward(build_loss())
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_grad(lambda: build_loss().item(), t.data, eps)
        worst = max(worst, rel_err(a, n))
    return worst


def project(out, r):
    """Scalar <out, r> built from graph ops, so every output entry gets a distinct weight."""
    flat = T.reshape(out, (1, out.data.size))
    return T.reshape(T.fully_connected(flat, T.Tensor(r.reshape(-1, 1))), ())


def leaf(rng, shape, scale=1.0):
    return T.Tensor(scale * rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in mod.RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  ({detail})")
