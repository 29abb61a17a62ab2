"""Small numba helpers shared by the model, geometry and integrator layers.

Point functions follow two conventions:
  scalar fields   f(x, p) -> float
  vector fields   f(x, p, out) -> None   (fills ``out``; also used for matrices)
where ``x`` is a 1-D configuration and ``p`` a float64 parameter vector.

Kernels that receive dispatchers as arguments are not disk-cached: numba's
cache index keys them by dispatcher identity, which does not survive the
dispatcher being collected.
"""

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher


def is_jitted(fn):
    return isinstance(fn, CPUDispatcher)


def ensure_jitted(fn):
    """Compile a user-supplied point function if it is not already a numba dispatcher."""
    if fn is None or is_jitted(fn):
        return fn
    return njit(fn)


@njit
def batch_scalar(fn, X, p):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = fn(X[i], p)
    return out


@njit
def batch_vector(fn, X, p, out):
    for i in range(X.shape[0]):
        fn(X[i], p, out[i])
    return out


def fd_hessian_from_gradient(grad_fn, h=1e-4):
    """Central finite-difference Hessian built on a jitted gradient."""

    @njit
    def hess(x, p, out):
        n = x.shape[0]
        gp = np.empty(n)
        gm = np.empty(n)
        xs = x.copy()
        for j in range(n):
            xs[j] = x[j] + h
            grad_fn(xs, p, gp)
            xs[j] = x[j] - h
            grad_fn(xs, p, gm)
            xs[j] = x[j]
            for i in range(n):
                out[i, j] = (gp[i] - gm[i]) / (2.0 * h)
        for i in range(n):
            for j in range(i + 1, n):
                s = 0.5 * (out[i, j] + out[j, i])
                out[i, j] = s
                out[j, i] = s

    return hess


def fd_gradient_from_scalar(fn, h=1e-6):
    @njit
    def grad(x, p, out):
        xs = x.copy()
        for j in range(x.shape[0]):
            xs[j] = x[j] + h
            fp = fn(xs, p)
            xs[j] = x[j] - h
            fm = fn(xs, p)
            xs[j] = x[j]
            out[j] = (fp - fm) / (2.0 * h)

    return grad
