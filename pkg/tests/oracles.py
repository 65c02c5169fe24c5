"""Independent oracles shared by the test suite.

Finite differences run in float64: float32 central differences at step 1e-3
carry ~1e-4 relative noise and cannot certify the 1e-4 gradient bound.
"""

import numpy as np

from m3f.tensor import Tape, Tensor, backward

FD_STEP = 1e-3
GRAD_TOL = 1e-4


def finite_difference(f, arrays, h=FD_STEP):
    """Central differences of scalar f() w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f()
            flat[i] = orig - h
            f_minus = f()
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).ravel())
    den = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(num / den)


def leaf(rng, *shape, scale=1.0):
    """float64 requires-grad leaf with entries uniform in [-scale, scale]."""
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True, dtype=np.float64)


def gradcheck(fn, leaves, h=FD_STEP):
    """Max relative error between tape gradients and finite differences of fn().

    fn rebuilds the graph from the given leaves on every call.
    """
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = [np.zeros_like(l.data) if l.grad is None else np.asarray(l.grad) for l in leaves]
    fd = finite_difference(lambda: float(fn().data), [l.data for l in leaves], h=h)
    return max(rel_error(a, f) for a, f in zip(analytic, fd))
