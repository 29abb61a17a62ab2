"""Validation studies: residence times, pathwise coupling, time marginals, orthogonality.

Every trajectory-level task draws its noise from ``NoiseStream(seed, index, tag)``
and results are reduced in index order, so worker counts never change outputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq

from . import conditional, integrate
from ._parallel import parallel_map
from .errors import ConfigError, InsufficientSamplesError, NumericalError
from .noise import TAG_AUX, TAG_EQUILIBRIUM, TAG_REDUCED, TAG_TRAJECTORY, NoiseStream

log = logging.getLogger(__name__)

Z95 = 1.959963984540054


# --- reports ----------------------------------------------------------------------


@dataclass(frozen=True)
class ResidenceReport:
    n_traj: int
    mean_tau: float
    half_ci: float  # 95% normal interval half-width, 1.96 sd / sqrt(n)
    dynamics_kind: str
    threshold: float
    taus: np.ndarray = field(repr=False)

    @property
    def interval(self):
        return self.mean_tau - self.half_ci, self.mean_tau + self.half_ci

    def overlaps(self, other, widen=1.0):
        return abs(self.mean_tau - other.mean_tau) <= widen * (self.half_ci + other.half_ci)


@dataclass(frozen=True)
class MarginalReport:
    t_checkpoints: np.ndarray
    tv_distance: np.ndarray  # sum_i |p_i - q_i| per checkpoint
    bin_edges: list
    noise_floor: np.ndarray  # 95th percentile of the distance between two same-law samples of size n
    noise_pair: np.ndarray = None  # distance between two independent reduced ensembles

    def above_floor(self):
        return self.tv_distance > self.noise_floor


@dataclass(frozen=True)
class PathwiseReport:
    sup_rms: float
    epsilon: float
    n_replicas: int
    rms: np.ndarray = field(repr=False)  # per checkpoint
    t: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class WellSamples:
    configs: np.ndarray
    acceptance_fraction: float
    stride: int

    def __len__(self):
        return len(self.configs)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.configs, dtype=dtype)


# --- initial conditions -------------------------------------------------------------


def sample_well_initials(
    model, rc, threshold, n, beta, seed, dt=1e-4, stride=10_000, max_steps=10**9, x0=None, burn_in_strides=10
):
    """Configurations with xi > threshold, subsampled from one long equilibrium run.

    Every ``stride`` steps the current configuration is kept if xi exceeds the
    threshold; the first ``burn_in_strides`` samples are discarded.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if x0 is None:
        x0 = np.zeros(model.dimension)
        x0[0] = 1.0
    x = np.array(x0, dtype=float)
    noise = NoiseStream(seed, 0, TAG_EQUILIBRIUM)
    kernel = integrate._specialized("full_record", model.grad_fn)
    chunk = 64
    kept = []
    seen = 0
    done = 0
    out = np.empty((chunk + 1, model.dimension))
    while len(kept) < n:
        if done >= max_steps:
            raise InsufficientSamplesError(
                f"only {len(kept)} of {n} configurations with xi > {threshold} after {done} steps"
            )
        m = chunk * stride
        for start in range(0, m, integrate.BLOCK_STEPS):
            steps = min(integrate.BLOCK_STEPS, m - start)
            G = noise.normals((steps, model.dimension))
            status, k = kernel(model.pvec, x, dt, beta, G, stride, start, out)
            if status == integrate.DIVERGED:
                raise NumericalError("equilibrium run diverged", step=done + start + k + 1)
        done += m
        samples = out[1:]
        if burn_in_strides > 0:
            drop = min(burn_in_strides, len(samples))
            samples = samples[drop:]
            burn_in_strides -= drop
        xi = rc.value(samples)
        seen += len(samples)
        kept.extend(samples[xi > threshold][: n - len(kept)].copy())
    acc = len(kept) / max(seen, 1)
    log.info("sampled %d well configurations, acceptance %.3f", n, acc)
    return WellSamples(np.array(kept), acc, stride)


# --- residence times ----------------------------------------------------------------


def _as_table(table_or_A, beta, grid=None):
    if isinstance(table_or_A, conditional.CoefficientTable):
        return table_or_A
    if callable(table_or_A):
        grid = np.linspace(-5.0, 5.0, 10_001) if grid is None else grid
        return conditional.table_from_functions(grid, lambda z: -table_or_A(z), lambda z: 1.0, table_or_A, beta)
    raise TypeError("expected a CoefficientTable or a callable A'(z)")


def residence_time_study(
    model, rc, table_or_A, threshold, n, dt, beta, seed, kind="full",
    initials=None, max_steps=10**8, workers=1,
):
    """Mean time to leave the well {xi > threshold}, starting from equilibrium configurations.

    ``kind='full'`` integrates the full dynamics until xi(X) < -threshold; the
    reduced kinds start from y = xi(x_i) and stop when y <= -threshold.
    A trajectory reaching ``max_steps`` aborts the study.
    """
    if kind not in ("full", "effective", "free_energy"):
        raise ValueError(f"unknown dynamics kind {kind!r}")
    if initials is None:
        initials = sample_well_initials(model, rc, threshold, n, beta, seed)
    X0 = np.asarray(initials)[:n]
    if len(X0) < n:
        raise InsufficientSamplesError(f"{n} initial configurations requested, {len(X0)} supplied")
    level = -threshold

    if kind == "full":
        def task(i):
            noise = NoiseStream(seed, i, TAG_TRAJECTORY)
            return integrate.first_exit_full(model, rc, X0[i], level, dt, beta, noise, max_steps)
    else:
        table = _as_table(table_or_A, beta)
        coeffs = integrate.reduced_coefficients(table, kind)
        Y0 = rc.value(X0)

        def task(i):
            noise = NoiseStream(seed, i, TAG_REDUCED)
            return integrate.first_exit_reduced(coeffs, Y0[i], level, dt, beta, noise, max_steps, table=table)

    steps = parallel_map(task, n, workers)
    censored = [i for i, s in enumerate(steps) if s is None]
    if censored:
        raise NumericalError(
            f"{len(censored)} trajectories did not leave the well within {max_steps} steps (first: #{censored[0]})"
        )
    taus = dt * np.asarray(steps, dtype=float)
    half = Z95 * taus.std(ddof=1) / math.sqrt(n)
    return ResidenceReport(n, float(taus.mean()), float(half), kind, float(threshold), taus)


# --- pathwise coupling --------------------------------------------------------------


def pathwise_deviation(model, rc, table, x0, T, dt, beta, n_replicas, seed, n_checkpoints=100, workers=1):
    """RMS over replicas of |xi(X_t) - y_t| at evenly spaced checkpoints (t = 0 included)."""
    n_steps = int(round(T / dt))
    if n_steps == 0:
        return np.zeros(1), np.zeros(1)
    stride = max(1, n_steps // n_checkpoints)

    def task(i):
        tr = integrate.coupled_run(model, rc, table, x0, T, dt, beta, seed, stride=stride, stream_id=i)
        return tr.t, (tr.xi - tr.y) ** 2

    runs = parallel_map(task, n_replicas, workers)
    t = runs[0][0]
    sq = np.zeros_like(t)
    for _, d in runs:
        sq += d
    return t, np.sqrt(sq / n_replicas)


def pathwise_study(
    model_builder, rc, table_builder, epsilon_list, T, dt, beta, n_replicas, seed,
    x0=None, n_checkpoints=100, workers=1,
):
    """Sup over checkpoints of the replica-RMS coupling error, one report per epsilon.

    ``model_builder(eps)`` returns the model and ``table_builder(model)`` its
    coefficient table (rebuilt per epsilon). ``dt`` is a scalar or a mapping
    eps -> dt, since stiffer models need smaller steps.
    """
    reports = []
    for eps in epsilon_list:
        model = model_builder(eps)
        table = table_builder(model)
        step = dt[eps] if isinstance(dt, dict) else dt
        start = np.array([1.0] + [0.0] * (model.dimension - 1)) if x0 is None else np.asarray(x0, dtype=float)
        t, rms = pathwise_deviation(model, rc, table, start, T, step, beta, n_replicas, seed, n_checkpoints, workers)
        reports.append(PathwiseReport(float(rms.max()), float(eps), n_replicas, rms, t))
    return reports


# --- time marginals -----------------------------------------------------------------


def _checkpoint_steps(t_checkpoints, dt):
    steps = np.rint(np.asarray(t_checkpoints, dtype=float) / dt).astype(np.int64)
    if np.any(np.abs(steps * dt - np.asarray(t_checkpoints)) > 1e-9 * np.maximum(1.0, steps * dt)):
        raise ConfigError("checkpoints must be multiples of dt")
    if np.any(np.diff(steps) <= 0) or steps[0] < 0:
        raise ConfigError("checkpoints must be increasing and non-negative")
    return steps


def full_ensemble(model, x0, t_checkpoints, n_ensemble, dt, beta, seed, workers=1):
    """Configurations of n independent full trajectories from x0 at the checkpoints: (n, k, d)."""
    steps = _checkpoint_steps(t_checkpoints, dt)
    g = int(np.gcd.reduce(steps[steps > 0])) if np.any(steps > 0) else 1

    def task(i):
        _, X = integrate.simulate_full(model, x0, int(steps[-1]), dt, beta, seed, stream_id=i, stride=g)
        return X[steps // g]

    return np.stack(parallel_map(task, n_ensemble, workers))


def reduced_ensemble(table, y0, t_checkpoints, n_ensemble, dt, beta, seed, tag=TAG_REDUCED, workers=1, kind="effective"):
    steps = _checkpoint_steps(t_checkpoints, dt)
    g = int(np.gcd.reduce(steps[steps > 0])) if np.any(steps > 0) else 1
    seed_for_tag = seed if tag == TAG_REDUCED else seed + (tag << 40)

    def task(i):
        _, y = integrate.simulate_reduced(table, y0, int(steps[-1]), dt, beta, seed_for_tag, stream_id=i, stride=g, kind=kind)
        return y[steps // g]

    return np.stack(parallel_map(task, n_ensemble, workers))


def tv_distance(a, b, bins=50):
    """Sum of |p_i - q_i| over shared uniform bins spanning the pooled min/max."""
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0] / len(a)
    q = np.histogram(b, edges)[0] / len(b)
    return float(np.abs(p - q).sum()), edges


def marginal_study(
    model, rc, table, t_checkpoints, n_ensemble, bins, dt, beta, seed,
    x0=None, full_samples=None, workers=1,
):
    """Distance between the laws of xi(X_t) and y_t at each checkpoint.

    Both ensembles start from x0 (y0 = xi(x0)). The noise floor is the 95th
    percentile of the distance between two independent n-sample histograms
    drawn from the pooled reduced histogram (two independent ensembles).
    ``full_samples`` may carry a precomputed ``full_ensemble`` for x0.
    """
    if n_ensemble < 100:
        raise ConfigError("n_ensemble must be at least 100")
    if x0 is None:
        x0 = np.array([1.0] + [0.0] * (model.dimension - 1))
    x0 = np.asarray(x0, dtype=float)
    if full_samples is None:
        full_samples = full_ensemble(model, x0, t_checkpoints, n_ensemble, dt, beta, seed, workers)
    full_xi = rc.value(full_samples[:n_ensemble])
    y0 = rc.value(x0)
    red = reduced_ensemble(table, y0, t_checkpoints, n_ensemble, dt, beta, seed, workers=workers)
    ref = reduced_ensemble(table, y0, t_checkpoints, n_ensemble, dt, beta, seed, tag=TAG_AUX, workers=workers)
    tv, floor, pair, edges = [], [], [], []
    for j in range(len(t_checkpoints)):
        d, e = tv_distance(full_xi[:, j], red[:, j], bins)
        tv.append(d)
        edges.append(e)
        pair.append(tv_distance(ref[:, j], red[:, j], bins)[0])
        pooled = np.concatenate([red[:, j], np.clip(ref[:, j], e[0], e[-1])])
        rng = np.random.default_rng([seed, j])
        floor.append(noise_floor(np.histogram(pooled, e)[0] / len(pooled), n_ensemble, rng))
    t = np.asarray(t_checkpoints, dtype=float)
    return MarginalReport(t, np.array(tv), edges, np.array(floor), np.array(pair))


def noise_floor(p, n, rng, n_boot=400, level=0.95):
    """Quantile of sum |p_i - q_i| between two independent n-sample histograms drawn from ``p``."""
    a = rng.multinomial(n, p, size=n_boot)
    b = rng.multinomial(n, p, size=n_boot)
    return float(np.quantile(np.abs(a - b).sum(axis=1) / n, level))


# --- orthogonality of the reaction coordinate and the stiff constraints -----------------


def _fd_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def constrained_point(rc, z, which=None):
    """A point of {xi = z} on which the stiff constraint(s) vanish."""
    names = rc.constraint_names()
    if not names:
        raise ValueError(f"reaction coordinate {rc.name!r} carries no constraint field")
    if rc.has_chart and len(names) == 1:
        s_lo, s_hi = rc.chart_range
        qs = lambda s: float(rc.constraint(rc.levelset_param(z, np.array([s]))[0]))
        grid = np.linspace(s_lo, s_hi, 2001)
        vals = np.array([qs(s) for s in grid])
        sign = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]
        if len(sign) == 0:
            raise NumericalError(f"no point with q = 0 on the chart of xi = {z}")
        i = sign[0]
        if vals[i] == 0.0:
            return rc.levelset_param(z, np.array([grid[i]]))[0]
        s = brentq(qs, grid[i], grid[i + 1], xtol=1e-15)
        return rc.levelset_param(z, np.array([s]))[0]
    if rc.seed_point is None:
        raise ValueError("need a chart or a seed point to locate constrained points")
    # alternate Newton projections onto each constraint and onto xi = z
    x = np.asarray(rc.seed_point(z), dtype=float)
    for _ in range(100):
        for name in names:
            for _ in range(50):
                q = float(rc.constraint(x, name))
                gq = rc.constraint_gradient(x, name)
                if abs(q) < 1e-14:
                    break
                x = x - q * gq / gq.dot(gq)
        x = conditional.project_onto_levelset(rc, x, z)
        if max(abs(float(rc.constraint(x, name))) for name in names) < 1e-12:
            return x
    raise NumericalError(f"projection onto the constraint set at xi = {z} did not converge")


def condition_cs1_check(model, rc, z_samples, fd=False, h=1e-6):
    """max |grad xi . grad q| over points of {q = 0} on the level sets z_samples.

    With several constraints (e.g. two bond lengths) the max runs over all of
    them. ``fd=True`` uses central finite differences for both gradients.
    """
    worst = 0.0
    for z in np.atleast_1d(z_samples):
        x = constrained_point(rc, float(z))
        if fd:
            gxi = _fd_gradient(lambda p: float(rc.value(p)), x, h)
        else:
            gxi = rc.gradient(x)
        for name in rc.constraint_names():
            if fd:
                gq = _fd_gradient(lambda p: float(rc.constraint(p, name)), x, h)
            else:
                gq = rc.constraint_gradient(x, name)
            worst = max(worst, abs(float(np.dot(gxi, gq))))
    return worst


# --- epsilon -> 0 limit of the effective drift -------------------------------------------


def drift_limit_errors(builder, limit_fn, epsilons, alphas, beta):
    """|b_eps(alpha) - b_lim(alpha)| by chart quadrature; array of shape (len(epsilons), len(alphas)).

    ``builder(eps)`` returns the pair (model, rc).
    """
    out = np.empty((len(epsilons), len(alphas)))
    for i, eps in enumerate(epsilons):
        model, rc = builder(eps)
        for j, a in enumerate(alphas):
            b = conditional.table_point_quadrature(model, rc, a, beta).value[0]
            out[i, j] = abs(b - limit_fn(a))
    return out


# --- ergodicity of the reduced dynamics ------------------------------------------------


def stationary_bin_probabilities(table, edges, n_fine=2_000_001):
    """Mass of exp(-beta A)/Z in each bin, plus the two tails below edges[0] and above edges[-1]."""
    zz = np.linspace(table.grid[0], table.grid[-1], n_fine)
    A = np.interp(zz, table.grid, table.free_energy)
    w = np.exp(-table.beta * (A - A.min()))
    cdf = cumulative_trapezoid(w, zz, initial=0.0)
    cdf /= cdf[-1]
    return np.diff(np.concatenate(([0.0], np.interp(edges, zz, cdf), [1.0])))


def ergodicity_distance(table, y0, n_steps, dt, seed, edges, stride=10, kind="effective"):
    """L1 distance between the occupation histogram of one long reduced run and exp(-beta A)/Z."""
    _, y = integrate.simulate_reduced(table, y0, n_steps, dt, table.beta, seed, stride=stride, kind=kind)
    bins = np.concatenate(([-np.inf], edges, [np.inf]))
    h = np.histogram(y, bins)[0] / len(y)
    return float(np.abs(h - stationary_bin_probabilities(table, edges)).sum())
