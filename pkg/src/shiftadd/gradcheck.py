"""Central finite-difference oracle for backward passes.

Checks run in float64: the kernels are dtype-polymorphic, and double precision
is the regime where a 1e-3 step resolves gradients to the 1e-4 level the test
suite asserts.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-3


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                   step: float = FD_STEP) -> np.ndarray:
    """Elementwise central differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Max absolute difference scaled by the larger gradient magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradients(f: Callable[..., float],
                    args: Sequence[np.ndarray],
                    analytic: Sequence[np.ndarray],
                    step: float = FD_STEP,
                    tol: float = 1e-4) -> float:
    """Compare analytic gradients of f(*args) against finite differences.

    `analytic[i]` must be the gradient with respect to `args[i]`. Returns the
    worst relative error and raises AssertionError past `tol`.
    """
    args = [np.asarray(a, dtype=np.float64) for a in args]
    worst = 0.0
    for i, arg in enumerate(args):
        def partial(x, _i=i):
            probe = list(args)
            probe[_i] = x
            return f(*probe)

        fd = numerical_grad(partial, arg, step=step)
        err = rel_error(analytic[i], fd)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch on argument {i}: rel error {err:.3e} > {tol:.1e}")
    return worst
