"""Potentials and reaction coordinates with exact derivatives.

Every builtin is defined once, as numba point functions (see ``_jit``), so the
same code serves the Python-level API and the compiled integrators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numba import njit

from ._jit import batch_scalar, batch_vector, ensure_jitted, fd_hessian_from_gradient
from .errors import NumericalError

FD_HESSIAN_STEP = 1e-4


def _as_points(x):
    x = np.asarray(x, dtype=float)
    return x, x.ndim == 1


def _eval_scalar(fn, x, p):
    x, single = _as_points(x)
    if single:
        return float(fn(np.ascontiguousarray(x), p))
    X = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    return batch_scalar(fn, X, p).reshape(x.shape[:-1])


def _eval_vector(fn, x, p):
    x, single = _as_points(x)
    n = x.shape[-1]
    X = np.ascontiguousarray(x.reshape(-1, n))
    out = np.empty((X.shape[0], n))
    batch_vector(fn, X, p, out)
    return out[0] if single else out.reshape(x.shape)


def _eval_matrix(fn, x, p):
    x, single = _as_points(x)
    n = x.shape[-1]
    X = np.ascontiguousarray(x.reshape(-1, n))
    out = np.empty((X.shape[0], n, n))
    batch_vector(fn, X, p, out)
    return out[0] if single else out.reshape(x.shape + (n,))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Potential energy V on R^n with its gradient and Hessian.

    ``energy_fn``, ``grad_fn`` and ``hess_fn`` are numba point functions taking
    the packed parameter vector ``pvec``. When no analytic Hessian is supplied,
    a central finite-difference Hessian (step 1e-4) is substituted.
    """

    name: str
    dimension: int
    params: Mapping[str, float]
    energy_fn: Callable
    grad_fn: Callable
    hess_fn: Callable | None = None
    box: tuple = ((-2.0, 2.0), (-2.0, 2.0))
    analytic_hessian: bool = field(init=False, default=True)

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if len(self.box) != self.dimension:
            raise ValueError("sampling box must have one interval per coordinate")
        object.__setattr__(self, "energy_fn", ensure_jitted(self.energy_fn))
        object.__setattr__(self, "grad_fn", ensure_jitted(self.grad_fn))
        if self.hess_fn is None:
            object.__setattr__(self, "analytic_hessian", False)
            object.__setattr__(self, "hess_fn", fd_hessian_from_gradient(self.grad_fn, FD_HESSIAN_STEP))
        else:
            object.__setattr__(self, "hess_fn", ensure_jitted(self.hess_fn))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def pvec(self):
        return np.array(list(self.params.values()), dtype=float) if self.params else np.zeros(1)

    def potential(self, x):
        return _eval_scalar(self.energy_fn, x, self.pvec)

    def gradient(self, x):
        return _eval_vector(self.grad_fn, x, self.pvec)

    def hessian(self, x):
        return _eval_matrix(self.hess_fn, x, self.pvec)

    def sample_box(self, n, rng):
        lo = np.array([b[0] for b in self.box])
        hi = np.array([b[1] for b in self.box])
        return lo + (hi - lo) * rng.random((n, self.dimension))


@dataclass(frozen=True, eq=False)
class ReactionCoordinate:
    """Scalar reaction coordinate xi with derivatives and optional level-set chart.

    ``chart_fn(z, s, p, out)`` maps (z, s) to a configuration on the level set
    {xi = z}; ``chart_range`` bounds s. ``constraint_fn``/``constraint_grad_fn``
    describe the stiff field q used by orthogonality checks; ``extra_constraints``
    holds further (name, value_fn, grad_fn) triples. ``grad_bounds`` records
    the interval (m, M) containing |grad xi| on the model's sampling box.
    """

    name: str
    value_fn: Callable
    grad_fn: Callable
    hess_fn: Callable | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    chart_fn: Callable | None = None
    chart_range: tuple[float, float] | None = None
    constraint_fn: Callable | None = None
    constraint_grad_fn: Callable | None = None
    extra_constraints: tuple = ()
    grad_bounds: tuple[float, float] = (0.0, math.inf)
    seed_point: Callable[[float], np.ndarray] | None = None
    analytic_hessian: bool = field(init=False, default=True)

    def __post_init__(self):
        for name in ("value_fn", "grad_fn", "chart_fn", "constraint_fn", "constraint_grad_fn"):
            object.__setattr__(self, name, ensure_jitted(getattr(self, name)))
        if self.hess_fn is None:
            object.__setattr__(self, "analytic_hessian", False)
            object.__setattr__(self, "hess_fn", fd_hessian_from_gradient(self.grad_fn, FD_HESSIAN_STEP))
        else:
            object.__setattr__(self, "hess_fn", ensure_jitted(self.hess_fn))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def pvec(self):
        return np.array(list(self.params.values()), dtype=float) if self.params else np.zeros(1)

    @property
    def has_chart(self):
        return self.chart_fn is not None

    def value(self, x):
        return _eval_scalar(self.value_fn, x, self.pvec)

    def gradient(self, x):
        return _eval_vector(self.grad_fn, x, self.pvec)

    def hessian(self, x):
        return _eval_matrix(self.hess_fn, x, self.pvec)

    def levelset_param(self, z, s):
        if self.chart_fn is None:
            raise ValueError(f"reaction coordinate {self.name!r} has no level-set chart")
        s = np.asarray(s, dtype=float)
        flat = np.atleast_1d(s).ravel()
        n = 2  # charts are only provided for planar models
        out = np.empty((flat.size, n))
        _chart_batch(self.chart_fn, float(z), flat, self.pvec, out)
        return out[0] if s.ndim == 0 else out.reshape(s.shape + (n,))

    def constraint(self, x, which=None):
        fn, _ = self._constraint_pair(which)
        return _eval_scalar(fn, x, self.pvec)

    def constraint_gradient(self, x, which=None):
        _, gfn = self._constraint_pair(which)
        return _eval_vector(gfn, x, self.pvec)

    def constraint_names(self):
        names = ["q"] if self.constraint_fn is not None else []
        return names + [c[0] for c in self.extra_constraints]

    def _constraint_pair(self, which):
        if which in (None, "q"):
            if self.constraint_fn is None:
                raise ValueError(f"reaction coordinate {self.name!r} has no constraint field")
            return self.constraint_fn, self.constraint_grad_fn
        for name, fn, gfn in self.extra_constraints:
            if name == which:
                return ensure_jitted(fn), ensure_jitted(gfn)
        raise KeyError(which)


@njit
def _chart_batch(chart, z, s, p, out):
    for i in range(s.shape[0]):
        chart(z, s[i], p, out[i])


# --- double well ----------------------------------------------------------------


@njit(cache=True)
def _dw_energy(x, p):
    q = x[0] * x[0] + x[1] - 1.0
    return (x[0] * x[0] - 1.0) ** 2 + q * q / p[0]


@njit(cache=True)
def _dw_grad(x, p, out):
    q = x[0] * x[0] + x[1] - 1.0
    out[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0) + 4.0 * x[0] * q / p[0]
    out[1] = 2.0 * q / p[0]


@njit(cache=True)
def _dw_hess(x, p, out):
    q = x[0] * x[0] + x[1] - 1.0
    out[0, 0] = 12.0 * x[0] * x[0] - 4.0 + (4.0 * q + 8.0 * x[0] * x[0]) / p[0]
    out[0, 1] = 4.0 * x[0] / p[0]
    out[1, 0] = out[0, 1]
    out[1, 1] = 2.0 / p[0]


@njit(cache=True)
def _parabola_q(x, p):
    return x[0] * x[0] + x[1] - 1.0


@njit(cache=True)
def _parabola_q_grad(x, p, out):
    out[0] = 2.0 * x[0]
    out[1] = 1.0


def builtin_doublewell(epsilon: float) -> ModelSpec:
    """V(x, y) = (x^2 - 1)^2 + (x^2 + y - 1)^2 / epsilon."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return ModelSpec("doublewell", 2, {"epsilon": float(epsilon)}, _dw_energy, _dw_grad, _dw_hess)


# --- xi1 / xi2 -----------------------------------------------------------------


@njit(cache=True)
def _xi1(x, p):
    return x[0]


@njit(cache=True)
def _xi1_grad(x, p, out):
    out[0] = 1.0
    for i in range(1, x.shape[0]):
        out[i] = 0.0


@njit(cache=True)
def _zero_hess(x, p, out):
    out[:, :] = 0.0


@njit(cache=True)
def _xi1_chart(z, s, p, out):
    out[0] = z
    out[1] = s


@njit(cache=True)
def _xi2(x, p):
    return x[0] * math.exp(-2.0 * x[1])


@njit(cache=True)
def _xi2_grad(x, p, out):
    e = math.exp(-2.0 * x[1])
    out[0] = e
    out[1] = -2.0 * x[0] * e


@njit(cache=True)
def _xi2_hess(x, p, out):
    e = math.exp(-2.0 * x[1])
    out[0, 0] = 0.0
    out[0, 1] = -2.0 * e
    out[1, 0] = -2.0 * e
    out[1, 1] = 4.0 * x[0] * e


@njit(cache=True)
def _xi2_chart(z, s, p, out):
    out[0] = z * math.exp(2.0 * s)
    out[1] = s


def _on_parabola(xfun):
    def seed(z):
        x = xfun(z)
        return np.array([x, 1.0 - x * x])

    return seed


def _xi2_seed_x(z):
    # root of x exp(2x^2 - 2) = z, i.e. the point of {xi2 = z} on q = 0
    from scipy.optimize import brentq

    if z == 0.0:
        return 0.0
    f = lambda x: math.log(abs(x)) + 2.0 * x * x - 2.0 - math.log(abs(z))
    r = brentq(f, 1e-3 * abs(z), 10.0, xtol=1e-15)
    return math.copysign(r, z)


def builtin_xi1() -> ReactionCoordinate:
    """xi1(x, y) = x, with |grad xi1| = 1."""
    return ReactionCoordinate(
        "xi1",
        _xi1,
        _xi1_grad,
        _zero_hess,
        chart_fn=_xi1_chart,
        chart_range=(-9.0, 3.0),  # covers the valley y = 1 - z^2 for |z| <= 3
        constraint_fn=_parabola_q,
        constraint_grad_fn=_parabola_q_grad,
        grad_bounds=(1.0, 1.0),
        seed_point=_on_parabola(lambda z: z),
    )


def builtin_xi2() -> ReactionCoordinate:
    """xi2(x, y) = x exp(-2y), orthogonal to the parabola field q = x^2 + y - 1."""
    return ReactionCoordinate(
        "xi2",
        _xi2,
        _xi2_grad,
        _xi2_hess,
        chart_fn=_xi2_chart,
        chart_range=(-4.0, 2.5),
        constraint_fn=_parabola_q,
        constraint_grad_fn=_parabola_q_grad,
        # |grad xi2| = exp(-2y) sqrt(1 + 4x^2) on [-2, 2]^2
        grad_bounds=(math.exp(-4.0), math.exp(4.0) * math.sqrt(17.0)),
        seed_point=_on_parabola(_xi2_seed_x),
    )


# --- three-atom molecule -------------------------------------------------------
# Gauge: r2 = 0 and r1 = (a, 0), leaving x = (a, c, d) with r3 = (c, d).
# Parameters p = (epsilon, l0, theta0, ktheta).


@njit(cache=True)
def _angle(x):
    a, c, d = x[0], x[1], x[2]
    sa = 1.0 if a >= 0.0 else -1.0
    return math.atan2(abs(d), sa * c)


@njit(cache=True)
def _angle_grad(x, p, out):
    a, c, d = x[0], x[1], x[2]
    sa = 1.0 if a >= 0.0 else -1.0
    sd = 1.0 if d >= 0.0 else -1.0
    r2 = c * c + d * d
    out[0] = 0.0
    out[1] = -abs(d) * sa / r2
    out[2] = sa * c * sd / r2


@njit(cache=True)
def _angle_hess(x, p, out):
    a, c, d = x[0], x[1], x[2]
    sa = 1.0 if a >= 0.0 else -1.0
    sd = 1.0 if d >= 0.0 else -1.0
    cp = sa * c
    dp = abs(d)
    r4 = (c * c + d * d) ** 2
    out[:, :] = 0.0
    out[1, 1] = 2.0 * cp * dp / r4
    out[2, 2] = -2.0 * cp * dp / r4
    out[1, 2] = sa * sd * (dp * dp - cp * cp) / r4
    out[2, 1] = out[1, 2]


@njit(cache=True)
def _angle_value(x, p):
    return _angle(x)


@njit(cache=True)
def _ta_energy(x, p):
    eps, l0, th0, k = p[0], p[1], p[2], p[3]
    q1 = abs(x[0]) - l0
    q3 = math.sqrt(x[1] * x[1] + x[2] * x[2]) - l0
    dth = _angle(x) - th0
    return (q1 * q1 + q3 * q3) / (2.0 * eps) + 0.5 * k * dth * dth


@njit(cache=True)
def _ta_grad(x, p, out):
    eps, l0, th0, k = p[0], p[1], p[2], p[3]
    a, c, d = x[0], x[1], x[2]
    r = math.sqrt(c * c + d * d)
    sa = 1.0 if a >= 0.0 else -1.0
    q1 = abs(a) - l0
    q3 = r - l0
    dth = _angle(x) - th0
    g = np.empty(3)
    _angle_grad(x, p, g)
    out[0] = q1 * sa / eps
    out[1] = q3 * c / (r * eps) + k * dth * g[1]
    out[2] = q3 * d / (r * eps) + k * dth * g[2]


@njit(cache=True)
def _ta_hess(x, p, out):
    eps, l0, th0, k = p[0], p[1], p[2], p[3]
    c, d = x[1], x[2]
    r = math.sqrt(c * c + d * d)
    q3 = r - l0
    dth = _angle(x) - th0
    g = np.empty(3)
    h = np.empty((3, 3))
    _angle_grad(x, p, g)
    _angle_hess(x, p, h)
    u = np.array([0.0, c / r, d / r])
    for i in range(3):
        for j in range(3):
            # bond q3: grad q3 grad q3^T + q3 (I - u u^T) / r on the (c, d) block
            proj = 0.0
            if i > 0 and j > 0:
                proj = ((1.0 if i == j else 0.0) - u[i] * u[j]) / r
            out[i, j] = (u[i] * u[j] + q3 * proj) / eps + k * (g[i] * g[j] + dth * h[i, j])
    out[0, 0] += 1.0 / eps


@njit(cache=True)
def _ta_q1(x, p):
    return abs(x[0]) - p[1]


@njit(cache=True)
def _ta_q1_grad(x, p, out):
    out[0] = 1.0 if x[0] >= 0.0 else -1.0
    out[1] = 0.0
    out[2] = 0.0


@njit(cache=True)
def _ta_q3(x, p):
    return math.sqrt(x[1] * x[1] + x[2] * x[2]) - p[1]


@njit(cache=True)
def _ta_q3_grad(x, p, out):
    r = math.sqrt(x[1] * x[1] + x[2] * x[2])
    out[0] = 0.0
    out[1] = x[1] / r
    out[2] = x[2] / r


def threeatom_configuration(r1x, r3, l0=None):
    """Pack gauge-fixed positions r1 = (r1x, 0), r2 = 0, r3 into a configuration."""
    return np.array([r1x, r3[0], r3[1]], dtype=float)


def check_threeatom_configuration(x):
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    if np.any(pts[:, 0] == 0.0) or np.any(np.hypot(pts[:, 1], pts[:, 2]) == 0.0):
        raise NumericalError("bond angle undefined: a particle coincides with the pinned atom")
    return x


def builtin_threeatom(epsilon=1e-3, l0=1.0, theta0=1.187, ktheta=208.0):
    """Three 2-D particles with stiff bonds and a soft bond-angle term.

    Returns ``(model, rc)`` where ``rc`` is the bond angle theta. The stiff
    field q1 = |r1 - r2| - l0 is the primary constraint; q3 is available as an
    extra constraint named ``"q3"``.
    """
    for name, v in (("epsilon", epsilon), ("l0", l0), ("theta0", theta0), ("ktheta", ktheta)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    params = {"epsilon": float(epsilon), "l0": float(l0), "theta0": float(theta0), "ktheta": float(ktheta)}
    box = ((0.5 * l0, 1.5 * l0), (-l0, l0), (0.5 * l0, 1.5 * l0))
    model = ModelSpec("threeatom", 3, params, _ta_energy, _ta_grad, _ta_hess, box=box)

    def seed(z):
        return np.array([l0, l0 * math.cos(z), l0 * math.sin(z)])

    rc = ReactionCoordinate(
        "theta",
        _angle_value,
        _angle_grad,
        _angle_hess,
        params=params,
        constraint_fn=_ta_q1,
        constraint_grad_fn=_ta_q1_grad,
        extra_constraints=(("q3", _ta_q3, _ta_q3_grad),),
        # |grad theta| = 1 / |r3|, and |r3| ranges over [l0 / 2, l0 sqrt(13) / 2] on the box
        grad_bounds=(2.0 / (math.sqrt(13.0) * l0), 2.0 / l0),
        seed_point=seed,
    )
    return model, rc


# --- Omega test case -----------------------------------------------------------
# V(x, y) = (x^2 - 1)^2 + x y + kappa y^2 + Omega(x)^2 y^2 / epsilon,  Omega = 2 + sin x.
# p = (epsilon, kappa)


@njit(cache=True)
def _om_energy(x, p):
    om = 2.0 + math.sin(x[0])
    y = x[1]
    return (x[0] * x[0] - 1.0) ** 2 + x[0] * y + p[1] * y * y + om * om * y * y / p[0]


@njit(cache=True)
def _om_grad(x, p, out):
    om = 2.0 + math.sin(x[0])
    omp = math.cos(x[0])
    y = x[1]
    out[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0) + y + 2.0 * om * omp * y * y / p[0]
    out[1] = x[0] + 2.0 * p[1] * y + 2.0 * om * om * y / p[0]


@njit(cache=True)
def _om_hess(x, p, out):
    om = 2.0 + math.sin(x[0])
    omp = math.cos(x[0])
    ompp = -math.sin(x[0])
    y = x[1]
    out[0, 0] = 12.0 * x[0] * x[0] - 4.0 + 2.0 * (omp * omp + om * ompp) * y * y / p[0]
    out[0, 1] = 1.0 + 4.0 * om * omp * y / p[0]
    out[1, 0] = out[0, 1]
    out[1, 1] = 2.0 * p[1] + 2.0 * om * om / p[0]


@njit(cache=True)
def _om_q(x, p):
    return (2.0 + math.sin(x[0])) * x[1]


@njit(cache=True)
def _om_q_grad(x, p, out):
    out[0] = math.cos(x[0]) * x[1]
    out[1] = 2.0 + math.sin(x[0])


OMEGA_KAPPA = 0.5


def builtin_omega_testcase(epsilon: float, kappa: float = OMEGA_KAPPA):
    """Stiff harmonic confinement in y with x-dependent frequency Omega(x) = 2 + sin x.

    ``kappa`` weights a soft y^2 term in the epsilon-independent part of the
    potential; it does not enter the epsilon -> 0 limit drift but keeps the
    O(epsilon) correction to the effective drift nonzero at every x.
    Returns ``(model, rc)`` with rc = x.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    model = ModelSpec("omega", 2, {"epsilon": float(epsilon), "kappa": float(kappa)}, _om_energy, _om_grad, _om_hess)
    rc = ReactionCoordinate(
        "x",
        _xi1,
        _xi1_grad,
        _zero_hess,
        chart_fn=_xi1_chart,
        chart_range=(-2.0, 2.0),
        constraint_fn=_om_q,
        constraint_grad_fn=_om_q_grad,
        grad_bounds=(1.0, 1.0),
        seed_point=lambda z: np.array([z, 0.0]),
    )
    return model, rc


def omega_limit_drift(alpha, beta):
    """Drift of the epsilon -> 0 limit dynamics: -d_x V0(alpha, 0) - Omega'/(beta Omega)."""
    alpha = np.asarray(alpha, dtype=float)
    return -4.0 * alpha * (alpha**2 - 1.0) - np.cos(alpha) / (beta * (2.0 + np.sin(alpha)))


def omega_exact_drift(alpha, epsilon, beta, kappa=OMEGA_KAPPA):
    """Closed-form conditional drift b_eps(alpha); y | x = alpha is Gaussian."""
    alpha = np.asarray(alpha, dtype=float)
    om = 2.0 + np.sin(alpha)
    omp = np.cos(alpha)
    stiff = kappa + om**2 / epsilon
    mean = -alpha / (2.0 * stiff)
    second = 1.0 / (2.0 * beta * stiff) + mean**2
    return -4.0 * alpha * (alpha**2 - 1.0) - mean - 2.0 * om * omp * second / epsilon


# --- registry ------------------------------------------------------------------

MODEL_NAMES = ("doublewell", "threeatom", "omega")
RC_NAMES = {"doublewell": ("xi1", "xi2"), "threeatom": ("theta",), "omega": ("x",)}


def build(model_name: str, rc_name: str | None = None, **params):
    """Resolve a (model, reaction coordinate) pair by name."""
    if model_name == "doublewell":
        model = builtin_doublewell(params.get("epsilon", 0.01))
        rc_name = rc_name or "xi2"
        if rc_name == "xi1":
            return model, builtin_xi1()
        if rc_name == "xi2":
            return model, builtin_xi2()
    elif model_name == "threeatom":
        keys = ("epsilon", "l0", "theta0", "ktheta")
        model, rc = builtin_threeatom(**{k: params[k] for k in keys if k in params})
        if rc_name in (None, "theta"):
            return model, rc
    elif model_name == "omega":
        model, rc = builtin_omega_testcase(params.get("epsilon", 1e-3), params.get("kappa", OMEGA_KAPPA))
        if rc_name in (None, "x", "xi1"):
            return model, rc
    else:
        raise KeyError(f"unknown model {model_name!r}; known: {', '.join(MODEL_NAMES)}")
    raise KeyError(f"unknown reaction coordinate {rc_name!r} for model {model_name!r}")


def gradient_fd_error(fn_scalar, fn_grad, points, h=1e-5):
    """Max over points of |FD grad - grad|_inf / max(|grad|_inf, 1)."""
    worst = 0.0
    for x in points:
        g = fn_grad(x)
        fd = np.empty_like(g)
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = h
            fd[j] = (fn_scalar(x + e) - fn_scalar(x - e)) / (2 * h)
        worst = max(worst, np.max(np.abs(fd - g)) / max(np.max(np.abs(g)), 1.0))
    return worst


def hessian_fd_error(fn_grad, fn_hess, points, h=1e-5):
    worst = 0.0
    for x in points:
        H = fn_hess(x)
        fd = np.empty_like(H)
        for j in range(len(x)):
            e = np.zeros_like(x)
            e[j] = h
            fd[:, j] = (fn_grad(x + e) - fn_grad(x - e)) / (2 * h)
        worst = max(worst, np.max(np.abs(fd - H)) / max(np.max(np.abs(H)), 1.0))
    return worst
