"""Shared test utilities: numeric differentiation and comparison helpers."""

import numpy as np

from hadapt.tensor import Tape


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at array x.

    f takes no arguments and must read x by reference, so in-place
    perturbations are visible to it.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise relative error with a denominator floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(build_loss, leaves, h: float = 1e-5, tol: float = 1e-6,
              floor: float = 1e-6) -> float:
    """Tape gradients of build_loss() against finite differences.

    build_loss constructs the graph from the given leaf Tensors and
    returns a scalar loss Tensor. Returns the worst relative error seen,
    and asserts it is under tol for every leaf.
    """
    for t in leaves:
        t.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss, free=True)

    worst = 0.0
    for t in leaves:
        assert t.grad is not None, f"no gradient reached leaf {t.name or t}"
        num = numeric_grad(lambda: float(build_loss().data), t.data, h=h)
        err = max_rel_err(t.grad, num, floor=floor)
        assert err < tol, f"gradient mismatch on {t.name or 'leaf'}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst
