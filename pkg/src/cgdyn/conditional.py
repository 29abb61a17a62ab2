"""Conditional expectations on level sets and the effective-coefficient table.

Two independent engines estimate averages against the conditioned measure
mu_z ~ exp(-beta V) |grad xi|^-1 dsigma on {xi = z}:

* ``conditional_expectation_quadrature`` integrates along a 1-D level-set chart
  (planar models only) with adaptive Gauss-Kronrod quadrature;
* ``conditional_expectation_mc`` time-averages a constrained overdamped
  trajectory that is projected back onto the level set after every step.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.integrate import cumulative_trapezoid, quad_vec

from . import geometry
from ._parallel import parallel_map
from .errors import NumericalError
from .noise import TAG_CONSTRAINED, NoiseStream

NORMALIZATION_FLOOR = 1e-300
NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class ConditionalEstimate:
    value: float | np.ndarray
    std_error: float | np.ndarray
    n_samples: int


# --- quadrature engine ---------------------------------------------------------

CHART_FD_STEP = 1e-6
_TABLE_POINTS = {}


def _table_point_fn(model, rc):
    """Compiled evaluator of the chart log-weight and the three table observables.

    Specialized per (model, reaction coordinate) so the quadrature integrand
    makes a single cheap compiled call per node.
    """
    key = (model.energy_fn, model.grad_fn, rc.grad_fn, rc.hess_fn, rc.chart_fn)
    if key in _TABLE_POINTS:
        return _TABLE_POINTS[key]
    energy, grad_v, grad_xi, hess_xi, chart = key
    n = model.dimension
    h = CHART_FD_STEP

    @njit
    def point(z, s, beta, pV, pxi, out):
        x = np.empty(n)
        xp = np.empty(n)
        xm = np.empty(n)
        chart(z, s, pxi, x)
        chart(z, s + h, pxi, xp)
        chart(z, s - h, pxi, xm)
        speed = 0.0
        for i in range(n):
            speed += (xp[i] - xm[i]) ** 2
        speed = math.sqrt(speed) / (2.0 * h)
        gv = np.empty(n)
        g = np.empty(n)
        H = np.empty((n, n))
        grad_v(x, pV, gv)
        grad_xi(x, pxi, g)
        hess_xi(x, pxi, H)
        nsq = 0.0
        gvg = 0.0
        lap = 0.0
        ghg = 0.0
        for i in range(n):
            nsq += g[i] * g[i]
            gvg += gv[i] * g[i]
            lap += H[i, i]
            for j in range(n):
                ghg += g[i] * H[i, j] * g[j]
        if not (nsq > 0.0 and speed > 0.0):
            out[0] = np.nan
            return
        out[0] = -beta * energy(x, pV) - 0.5 * math.log(nsq) + math.log(speed)
        out[1] = -gvg + lap / beta
        out[2] = nsq
        out[3] = gvg / nsq - (lap / nsq - 2.0 * ghg / (nsq * nsq)) / beta

    _TABLE_POINTS[key] = point
    return point


def _chart_points(rc, z, s):
    return rc.levelset_param(z, s)


def _chart_log_weight(model, rc, z, s, beta, h=CHART_FD_STEP):
    """log of exp(-beta V) |grad xi|^-1 |d chart / ds| along the chart."""
    X = _chart_points(rc, z, s)
    speed = np.linalg.norm(_chart_points(rc, z, s + h) - _chart_points(rc, z, s - h), axis=-1) / (2 * h)
    gnorm = np.linalg.norm(rc.gradient(X), axis=-1)
    with np.errstate(divide="ignore"):
        return X, -beta * model.potential(X) - np.log(gnorm) + np.log(speed)


def _integrate_chart(rc, z, logw_scan, evaluate, n_scan, rtol):
    # locate the window where the weight exceeds 1e-20 of its maximum, then integrate
    s_lo, s_hi = rc.chart_range
    s = np.linspace(s_lo, s_hi, n_scan)
    logw = logw_scan(s)
    if not np.any(np.isfinite(logw)):
        raise NumericalError(f"level set xi = {z} carries no weight")
    top = int(np.nanargmax(logw))
    m = logw[top]
    keep = np.nonzero(logw > m - 46.0)[0]
    a = s[max(keep[0] - 1, 0)]
    b = s[min(keep[-1] + 1, n_scan - 1)]

    def integrand(t):
        lw, g = evaluate(t)
        if not math.isfinite(lw):
            raise NumericalError(f"degenerate chart point s = {t} on xi = {z}")
        w = math.exp(lw - m)
        return np.concatenate(([w], w * g))

    points = [s[top]] if a < s[top] < b else None
    res, _ = quad_vec(integrand, a, b, epsabs=0.0, epsrel=rtol, norm="max", points=points, limit=2000)
    norm = res[0]
    if not norm > 0 or m + math.log(norm) < math.log(NORMALIZATION_FLOOR):
        raise NumericalError(f"normalization of the conditioned measure at z = {z} is below {NORMALIZATION_FLOOR}")
    return res[1:] / norm


def _check_chart(rc, beta):
    if not rc.has_chart:
        raise ValueError(f"reaction coordinate {rc.name!r} has no level-set chart; use the MC engine")
    if not beta > 0:
        raise ValueError("beta must be positive")


def conditional_expectation_quadrature(model, rc, observable, z, beta, n_scan=4001, rtol=1e-11):
    """Average of ``observable`` against mu_z, by adaptive quadrature along the chart.

    ``observable`` maps a batch of configurations (N, n) to (N,) or (N, k).
    The integration window is the part of ``rc.chart_range`` where the weight
    exceeds 1e-20 of its maximum, located by a uniform scan of ``n_scan`` points.
    """
    _check_chart(rc, beta)

    def evaluate(t):
        X, lw = _chart_log_weight(model, rc, z, np.array([t]), beta)
        return lw[0], np.atleast_1d(np.asarray(observable(X), dtype=float)[0])

    value = _integrate_chart(rc, z, lambda s: _chart_log_weight(model, rc, z, s, beta)[1], evaluate, n_scan, rtol)
    if value.size == 1:
        return ConditionalEstimate(float(value[0]), 0.0, 0)
    return ConditionalEstimate(value, np.zeros_like(value), 0)


def table_point_quadrature(model, rc, z, beta, n_scan=4001, rtol=1e-11):
    """Quadrature estimate of (drift integrand, |grad xi|^2, local mean force) at one node.

    Same computation as ``conditional_expectation_quadrature`` with
    ``geometry.table_observables``, evaluated through one compiled call per point.
    """
    _check_chart(rc, beta)
    point = _table_point_fn(model, rc)
    pV, pxi = model.pvec, rc.pvec
    buf = np.empty(4)
    z = float(z)

    def evaluate(t):
        point(z, float(t), beta, pV, pxi, buf)
        return buf[0], buf[1:].copy()

    value = _integrate_chart(rc, z, lambda s: _chart_log_weight(model, rc, z, s, beta)[1], evaluate, n_scan, rtol)
    return ConditionalEstimate(value, np.zeros_like(value), 0)


# --- constrained Monte Carlo engine --------------------------------------------


@njit
def _project(xi, gradxi, pxi, xs, z, out, g_at, tol):
    # solve xi(xs + lam * grad xi(xs)) = z for lam; returns iterations or -1
    n = xs.shape[0]
    gradxi(xs, pxi, g_at)
    direction = g_at.copy()
    lam = 0.0
    for it in range(NEWTON_MAX_ITER):
        for i in range(n):
            out[i] = xs[i] + lam * direction[i]
        f = xi(out, pxi) - z
        if not math.isfinite(f):
            return -1
        if abs(f) <= tol:
            return it
        gradxi(out, pxi, g_at)
        df = 0.0
        for i in range(n):
            df += g_at[i] * direction[i]
        if df == 0.0 or not math.isfinite(df):
            return -1
        lam -= f / df
    return -1


_CHAINS = {}


def _constrained_chain(gradV, xi, gradxi):
    """Projected Euler-Maruyama chain on {xi = z}, compiled with the point functions bound."""
    key = (gradV, xi, gradxi)
    if key in _CHAINS:
        return _CHAINS[key]

    @njit
    def project(pxi, xs, z, out, g_at, tol):
        n = xs.shape[0]
        gradxi(xs, pxi, g_at)
        direction = g_at.copy()
        lam = 0.0
        for it in range(NEWTON_MAX_ITER):
            for i in range(n):
                out[i] = xs[i] + lam * direction[i]
            f = xi(out, pxi) - z
            if not math.isfinite(f):
                return -1
            if abs(f) <= tol:
                return it
            gradxi(out, pxi, g_at)
            df = 0.0
            for i in range(n):
                df += g_at[i] * direction[i]
            if df == 0.0 or not math.isfinite(df):
                return -1
            lam -= f / df
        return -1

    @njit
    def chain(pV, pxi, x0, z, dt, beta, G, positions):
        # returns (status, halvings, step); a failed projection is retried once with dt / 2
        n = x0.shape[0]
        x = x0.copy()
        gv = np.empty(n)
        xs = np.empty(n)
        xn = np.empty(n)
        g_at = np.empty(n)
        tol = 1e-12 * (1.0 + abs(z))
        halvings = 0
        for k in range(G.shape[0]):
            gradV(x, pV, gv)
            h = dt
            ok = False
            for attempt in range(2):
                c = math.sqrt(2.0 * h / beta)
                for i in range(n):
                    xs[i] = x[i] - h * gv[i] + c * G[k, i]
                if project(pxi, xs, z, xn, g_at, tol) >= 0:
                    ok = True
                    break
                halvings += 1
                h = 0.5 * dt
            if not ok:
                return 1, halvings, k
            for i in range(n):
                x[i] = xn[i]
                positions[k, i] = xn[i]
        return 0, halvings, G.shape[0]

    _CHAINS[key] = chain
    return chain


def project_onto_levelset(rc, x, z):
    """Newton projection of ``x`` onto {xi = z} along grad xi(x)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    g = np.empty_like(x)
    it = _project(rc.value_fn, rc.grad_fn, rc.pvec, x, float(z), out, g, 1e-12 * (1.0 + abs(z)))
    if it < 0:
        raise NumericalError(f"Newton projection onto xi = {z} did not converge")
    return out


def _levelset_start(model, rc, z, beta):
    if rc.has_chart:
        s = np.linspace(*rc.chart_range, 4001)
        X, logw = _chart_log_weight(model, rc, z, s, beta)
        return X[int(np.nanargmax(logw))]
    if rc.seed_point is None:
        raise ValueError("need x0, a level-set chart, or a seed point to start the constrained chain")
    return project_onto_levelset(rc, rc.seed_point(z), z)


def _ratio_blocks(num, den, n_blocks):
    """Ratio estimate sum(num)/sum(den) with a blocked delta-method standard error."""
    n = (len(den) // n_blocks) * n_blocks
    num = num[:n]
    den = den[:n]
    ratio = num.sum(axis=0) / den.sum()
    bn = num.reshape((n_blocks, -1) + num.shape[1:]).mean(axis=1)
    bd = den.reshape(n_blocks, -1).mean(axis=1)
    resid = (bn - np.multiply.outer(bd, ratio)) / bd.mean()
    se = resid.std(axis=0, ddof=1) / math.sqrt(n_blocks)
    return ratio, se


def conditional_expectation_mc(
    model, rc, observable, z, beta, n_steps, dt, seed, x0=None, stream_id=0, n_blocks=100, burn_in=None
):
    """Average of ``observable`` against mu_z from a projected overdamped chain.

    Each step makes an unconstrained Euler-Maruyama proposal x* and moves it
    back onto {xi = z} along grad xi(x*). Projecting along the gradient at the
    proposal adds a tangential drift -2 beta^-1 P grad log|grad xi|, so the chain
    samples exp(-beta V) |grad xi|^-2 dsigma; samples are reweighted by |grad xi|
    to recover mu_z. The standard error uses ``n_blocks`` contiguous blocks.
    """
    if not (beta > 0 and dt > 0):
        raise ValueError("beta and dt must be positive")
    n_steps = int(n_steps)
    if burn_in is None:
        burn_in = n_steps // n_blocks
    x0 = _levelset_start(model, rc, z, beta) if x0 is None else project_onto_levelset(rc, x0, z)
    noise = NoiseStream(seed, stream_id, TAG_CONSTRAINED)
    total = n_steps + burn_in
    G = noise.normals((total, len(x0)))
    positions = np.empty((total, len(x0)))
    chain = _constrained_chain(model.grad_fn, rc.value_fn, rc.grad_fn)
    status, halvings, step = chain(model.pvec, rc.pvec, x0, float(z), dt, beta, G, positions)
    if status != 0:
        raise NumericalError(f"constrained projection onto xi = {z} failed after halving dt", step=step)
    X = positions[burn_in:]
    w = np.linalg.norm(rc.gradient(X), axis=-1)
    g = np.asarray(observable(X), dtype=float)
    num = g * (w if g.ndim == 1 else w[:, None])
    value, se = _ratio_blocks(num, w, n_blocks)
    if np.ndim(value) == 0:
        return ConditionalEstimate(float(value), float(se), n_steps)
    return ConditionalEstimate(value, se, n_steps)


# --- coefficient table ---------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    step: float
    refine_lo: float | None = None
    refine_hi: float | None = None
    refine_step: float | None = None

    def nodes(self):
        if not (self.hi > self.lo and self.step > 0):
            raise ValueError("grid needs hi > lo and a positive step")
        k = int(round((self.hi - self.lo) / self.step))
        coarse = self.lo + self.step * np.arange(k + 1)
        if self.refine_step is None:
            return coarse
        rlo, rhi, rs = self.refine_lo, self.refine_hi, self.refine_step
        if not (rhi > rlo and rs > 0):
            raise ValueError("refined sub-range needs refine_hi > refine_lo and a positive step")
        kf = int(round((rhi - rlo) / rs))
        fine = rlo + rs * np.arange(kf + 1)
        outside = coarse[(coarse < rlo - 1e-9 * self.step) | (coarse > rhi + 1e-9 * self.step)]
        return np.sort(np.concatenate([outside, fine]))


# grid of the reference xi2 computation: step 0.1 on [-200, 200], 5e-3 on [-0.3, 0.3]
XI2_GRID = GridSpec(-200.0, 200.0, 0.1, -0.3, 0.3, 5e-3)
XI1_GRID = GridSpec(-3.0, 3.0, 0.1, -0.3, 0.3, 5e-3)


@dataclass
class InterpolationStats:
    clamped: int = 0


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """Tabulated effective coefficients b(z), sigma(z), A'(z), linearly interpolated."""

    grid: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    aprime: np.ndarray
    beta: float
    b_err: np.ndarray | None = None
    sigma_err: np.ndarray | None = None
    aprime_err: np.ndarray | None = None
    stats: InterpolationStats = field(default_factory=InterpolationStats)

    def __post_init__(self):
        arrays = [np.ascontiguousarray(getattr(self, k), dtype=float) for k in ("grid", "b", "sigma", "aprime")]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise ValueError("grid, b, sigma and aprime must be 1-D arrays of equal length")
        if arrays[0].size < 2 or np.any(np.diff(arrays[0]) <= 0):
            raise ValueError("grid must be strictly increasing with at least two nodes")
        if np.any(arrays[2] <= 0):
            raise ValueError("sigma must be positive")
        for k, a in zip(("grid", "b", "sigma", "aprime"), arrays):
            object.__setattr__(self, k, a)

    @property
    def free_energy(self):
        """A(z) by trapezoidal integration of A', anchored at A(grid[0]) = 0."""
        return cumulative_trapezoid(self.aprime, self.grid, initial=0.0)

    def restrict(self, lo, hi):
        keep = (self.grid >= lo) & (self.grid <= hi)
        errs = {k: (None if getattr(self, k) is None else getattr(self, k)[keep]) for k in ("b_err", "sigma_err", "aprime_err")}
        return CoefficientTable(self.grid[keep], self.b[keep], self.sigma[keep], self.aprime[keep], self.beta, **errs)

    def with_columns(self, **kw):
        cols = dict(grid=self.grid, b=self.b, sigma=self.sigma, aprime=self.aprime)
        cols.update(kw)
        return CoefficientTable(beta=self.beta, **cols)


def table_from_functions(grid, b_fn, sigma_fn, aprime_fn, beta):
    grid = np.asarray(grid, dtype=float)
    return CoefficientTable(grid, b_fn(grid), sigma_fn(grid) * np.ones_like(grid), aprime_fn(grid), beta)


def xi1_mean_force(z):
    """Derivative of the xi1 free energy (z^2 - 1)^2 of the double well."""
    z = np.asarray(z, dtype=float)
    return 4.0 * z * (z * z - 1.0)


def xi1_analytic_table(beta, grid=None):
    """b = -A1', sigma = 1 (|grad xi1| = 1, so the effective and free-energy dynamics coincide)."""
    if grid is None:
        grid = XI1_GRID.nodes()
    return table_from_functions(grid, lambda z: -xi1_mean_force(z), lambda z: 1.0, xi1_mean_force, beta)


def build_coefficient_table(
    model, rc, beta, grid_spec, engine="quadrature", n_steps=200_000, dt=1e-4, seed=0, workers=1
):
    """Evaluate b (drift integrand), sigma^2 (|grad xi|^2) and A' (local mean force)
    under mu_z at every grid node with the chosen engine."""
    nodes = grid_spec.nodes() if isinstance(grid_spec, GridSpec) else np.asarray(grid_spec, dtype=float)
    obs = geometry.table_observables(model, rc, beta)
    if engine == "quadrature":
        task = lambda i: table_point_quadrature(model, rc, nodes[i], beta)
    elif engine == "mc":
        task = lambda i: conditional_expectation_mc(model, rc, obs, nodes[i], beta, n_steps, dt, seed, stream_id=i)
    else:
        raise ValueError(f"unknown engine {engine!r}; use 'quadrature' or 'mc'")
    results = parallel_map(task, len(nodes), workers)
    vals = np.array([r.value for r in results])
    errs = np.array([r.std_error for r in results])
    sigma = np.sqrt(vals[:, 1])
    kw = {}
    if engine == "mc":
        # d sigma = d(sigma^2) / (2 sigma)
        kw = dict(b_err=errs[:, 0], sigma_err=errs[:, 1] / (2 * sigma), aprime_err=errs[:, 2])
    return CoefficientTable(nodes, vals[:, 0], sigma, vals[:, 2], beta, **kw)


def check_stationarity(table: CoefficientTable) -> float:
    """Max relative residual of beta^-1 d/dz(sigma^2 e^{-beta A}) = b e^{-beta A} on interior nodes.

    Derivatives are central differences on the (possibly non-uniform) grid; A is
    shifted by its minimum before exponentiation, which scales both sides alike.
    """
    A = table.free_energy
    weight = np.exp(-table.beta * (A - A.min()))
    lhs = np.gradient(table.sigma**2 * weight, table.grid) / table.beta
    rhs = table.b * weight
    resid = np.abs(lhs - rhs)[1:-1]
    return float(resid.max() / np.abs(rhs).max())


def interpolate(table: CoefficientTable, z):
    """Piecewise-linear (b, sigma, A') at z; values outside the grid are clamped and counted."""
    z_arr = np.asarray(z, dtype=float)
    outside = int(np.count_nonzero((z_arr < table.grid[0]) | (z_arr > table.grid[-1])))
    if outside:
        table.stats.clamped += outside
    out = tuple(np.interp(z_arr, table.grid, col) for col in (table.b, table.sigma, table.aprime))
    if z_arr.ndim == 0:
        return tuple(float(v) for v in out)
    return out


# --- CSV ----------------------------------------------------------------------

TABLE_COLUMNS = ("z", "b", "sigma", "aprime")


def write_table(table, path, header=None):
    """CSV with header ``z,b,sigma,aprime``; ``header`` lines are emitted as ``# `` comments."""
    buf = io.StringIO()
    lines = list(header or [])
    if not any(l.strip().startswith("beta") for l in lines):
        lines.append(f"beta = {table.beta!r}")
    for line in lines:
        buf.write(f"# {line}\n")
    buf.write(",".join(TABLE_COLUMNS) + "\n")
    for row in zip(table.grid, table.b, table.sigma, table.aprime):
        buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_table(path, beta=None):
    header_beta = None
    with open(path) as fh:
        lines = fh.readlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            if key.strip() == "beta":
                header_beta = float(val)
        elif line.strip():
            body.append(line)
    if body[0].strip().split(",") != list(TABLE_COLUMNS):
        raise ValueError(f"{path}: expected header {','.join(TABLE_COLUMNS)}")
    data = np.loadtxt(body[1:], delimiter=",", ndmin=2)
    beta = beta if beta is not None else header_beta
    if beta is None:
        raise ValueError(f"{path}: beta missing from header; pass it explicitly")
    return CoefficientTable(data[:, 0], data[:, 1], data[:, 2], data[:, 3], beta)
