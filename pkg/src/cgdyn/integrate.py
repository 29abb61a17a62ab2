"""Euler-Maruyama integrators for the full, effective and free-energy dynamics.

The single-step functions (``em_step_*``) are the reference definitions. Long
runs go through compiled kernels that consume pre-drawn blocks of standard
normals from a ``NoiseStream``; a kernel step performs exactly the same
arithmetic as the corresponding single step.

Reduced dynamics are always driven by a ``CoefficientTable``: the effective
dynamics uses (b, sigma) and the free-energy dynamics uses (-A', 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import conditional
from .errors import NumericalError
from .noise import TAG_REDUCED, TAG_TRAJECTORY, NoiseStream

DIVERGENCE_BOUND = 1e6
BLOCK_STEPS = 1 << 16

# kernel status codes
RUNNING = 0
EXITED = 1
DIVERGED = 2


@dataclass(frozen=True)
class FullState:
    x: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class ReducedState:
    y: float
    t: float = 0.0


def _check_positive(dt, beta):
    if not (dt > 0 and beta > 0):
        raise ValueError("dt and beta must be positive")


def _step_index(t, dt):
    return int(round(t / dt)) + 1


def em_step_full(model, state: FullState, dt, beta, noise) -> FullState:
    """X' = X - dt grad V(X) + sqrt(2 dt / beta) G with G ~ N(0, I)."""
    _check_positive(dt, beta)
    G = noise.normals(model.dimension)
    x = state.x - dt * model.gradient(state.x) + math.sqrt(2.0 * dt / beta) * G
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_BOUND:
        raise NumericalError("full dynamics diverged; dt too large for the stiffness", step=_step_index(state.t, dt))
    return FullState(x, state.t + dt)


def em_step_reduced(table, state: ReducedState, dt, beta, dB) -> ReducedState:
    """y' = y + b(y) dt + sqrt(2 / beta) sigma(y) dB, coefficients interpolated from ``table``."""
    _check_positive(dt, beta)
    b, sigma, _ = conditional.interpolate(table, state.y)
    return ReducedState(state.y + b * dt + math.sqrt(2.0 / beta) * sigma * dB, state.t + dt)


def em_step_freeenergy(aprime_fn, state: ReducedState, dt, beta, dB) -> ReducedState:
    """y' = y - A'(y) dt + sqrt(2 / beta) dB."""
    _check_positive(dt, beta)
    return ReducedState(state.y - float(aprime_fn(state.y)) * dt + math.sqrt(2.0 / beta) * dB, state.t + dt)


def reduced_coefficients(table, kind="effective"):
    """(grid, drift, sigma) arrays that the compiled reduced kernels consume."""
    if kind == "effective":
        return table.grid, table.b, table.sigma
    if kind == "free_energy":
        return table.grid, -table.aprime, np.ones_like(table.grid)
    raise ValueError(f"unknown reduced dynamics {kind!r}; use 'effective' or 'free_energy'")


# --- compiled kernels ------------------------------------------------------------


@njit(cache=True)
def _locate(grid, y):
    # index i with grid[i] <= y < grid[i+1]; -1 / len-1 outside
    n = grid.shape[0]
    if y < grid[0]:
        return -1
    if y >= grid[n - 1]:
        return n - 1
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if grid[mid] <= y:
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True)
def _coeffs(grid, drift, sigma, y):
    """Linear interpolation of (drift, sigma) with clamping; third value flags clamping."""
    i = _locate(grid, y)
    n = grid.shape[0]
    if i < 0:
        return drift[0], sigma[0], 1
    if i >= n - 1:
        return drift[n - 1], sigma[n - 1], 1 if y > grid[n - 1] else 0
    w = (y - grid[i]) / (grid[i + 1] - grid[i])
    return drift[i] + w * (drift[i + 1] - drift[i]), sigma[i] + w * (sigma[i + 1] - sigma[i]), 0


_KERNELS = {}


def _specialized(kind, *fns):
    """Kernel compiled with the model's point functions bound as constants.

    Binding (rather than passing functions as arguments) lets numba inline the
    point functions, which is several times faster in the inner loop.
    """
    key = (kind,) + fns
    if key not in _KERNELS:
        _KERNELS[key] = _FACTORIES[kind](*fns)
    return _KERNELS[key]


def _make_full_exit(gradV, xi):
    @njit
    def full_exit_block(pV, pxi, x, dt, beta, G, level):
        """Advance x over the block; stop at the first step with xi(x) < level."""
        n = x.shape[0]
        gv = np.empty(n)
        c = math.sqrt(2.0 * dt / beta)
        for k in range(G.shape[0]):
            gradV(x, pV, gv)
            ok = True
            for i in range(n):
                x[i] = x[i] - dt * gv[i] + c * G[k, i]
                if not (abs(x[i]) <= DIVERGENCE_BOUND):
                    ok = False
            if not ok:
                return DIVERGED, k
            if xi(x, pxi) < level:
                return EXITED, k
        return RUNNING, G.shape[0]

    return full_exit_block


def _make_full_record(gradV):
    @njit
    def full_record_block(pV, x, dt, beta, G, stride, offset, out):
        """Advance x over the block, storing x after every ``stride``-th global step."""
        n = x.shape[0]
        gv = np.empty(n)
        c = math.sqrt(2.0 * dt / beta)
        for k in range(G.shape[0]):
            gradV(x, pV, gv)
            ok = True
            for i in range(n):
                x[i] = x[i] - dt * gv[i] + c * G[k, i]
                if not (abs(x[i]) <= DIVERGENCE_BOUND):
                    ok = False
            if not ok:
                return DIVERGED, k
            step = offset + k + 1
            if step % stride == 0:
                out[step // stride, :] = x
        return RUNNING, G.shape[0]

    return full_record_block


def _make_coupled(gradV, xi, gradxi):
    @njit
    def coupled_block(pV, pxi, grid, drift, sigma, x, y0, dt, beta, G, stride, offset, out_xi, out_y):
        """Full and reduced dynamics driven by one noise: dB = (grad xi / |grad xi|)(X_n) . dW_n."""
        n = x.shape[0]
        gv = np.empty(n)
        g = np.empty(n)
        c = math.sqrt(2.0 * dt / beta)
        cy = math.sqrt(2.0 / beta)
        sdt = math.sqrt(dt)
        y = y0
        clamped = 0
        for k in range(G.shape[0]):
            gradxi(x, pxi, g)
            nrm = 0.0
            proj = 0.0
            for i in range(n):
                nrm += g[i] * g[i]
                proj += g[i] * G[k, i]
            if not (nrm > 0.0):
                return DIVERGED, k, y, clamped
            b, s, flag = _coeffs(grid, drift, sigma, y)
            clamped += flag
            y = y + b * dt + cy * s * sdt * proj / math.sqrt(nrm)
            gradV(x, pV, gv)
            ok = abs(y) <= DIVERGENCE_BOUND
            for i in range(n):
                x[i] = x[i] - dt * gv[i] + c * G[k, i]
                if not (abs(x[i]) <= DIVERGENCE_BOUND):
                    ok = False
            if not ok:
                return DIVERGED, k, y, clamped
            step = offset + k + 1
            if step % stride == 0:
                out_xi[step // stride] = xi(x, pxi)
                out_y[step // stride] = y
        return RUNNING, G.shape[0], y, clamped

    return coupled_block


_FACTORIES = {"full_exit": _make_full_exit, "full_record": _make_full_record, "coupled": _make_coupled}


@njit(cache=True)
def reduced_exit_block(grid, drift, sigma, y0, dt, beta, G, level):
    """Reduced dynamics until y <= level. Returns (status, steps, y, clamped)."""
    y = y0
    c = math.sqrt(2.0 * dt / beta)
    clamped = 0
    for k in range(G.shape[0]):
        b, s, out = _coeffs(grid, drift, sigma, y)
        clamped += out
        y = y + b * dt + c * s * G[k]
        if not (abs(y) <= DIVERGENCE_BOUND):
            return DIVERGED, k, y, clamped
        if y <= level:
            return EXITED, k, y, clamped
    return RUNNING, G.shape[0], y, clamped


@njit(cache=True)
def reduced_record_block(grid, drift, sigma, y0, dt, beta, G, stride, offset, out):
    y = y0
    c = math.sqrt(2.0 * dt / beta)
    clamped = 0
    for k in range(G.shape[0]):
        b, s, flag = _coeffs(grid, drift, sigma, y)
        clamped += flag
        y = y + b * dt + c * s * G[k]
        if not (abs(y) <= DIVERGENCE_BOUND):
            return DIVERGED, k, y, clamped
        step = offset + k + 1
        if step % stride == 0:
            out[step // stride] = y
    return RUNNING, G.shape[0], y, clamped


# --- Python drivers ------------------------------------------------------------------


def _diverged(what, step):
    return NumericalError(f"{what} diverged (|coordinate| > {DIVERGENCE_BOUND:g} or non-finite)", step=step)


def first_exit_full(model, rc, x0, level, dt, beta, noise, max_steps):
    """Number of steps until xi(X) < level for the first time; None if ``max_steps`` is reached."""
    _check_positive(dt, beta)
    kernel = _specialized("full_exit", model.grad_fn, rc.value_fn)
    x = np.array(x0, dtype=float)
    done = 0
    while done < max_steps:
        m = min(BLOCK_STEPS, max_steps - done)
        G = noise.normals((m, model.dimension))
        status, k = kernel(model.pvec, rc.pvec, x, dt, beta, G, level)
        if status == DIVERGED:
            raise _diverged("full dynamics", done + k + 1)
        if status == EXITED:
            return done + k + 1
        done += m
    return None


def first_exit_reduced(coeffs, y0, level, dt, beta, noise, max_steps, table=None):
    """Steps until the reduced process reaches y <= level; ``coeffs`` is (grid, drift, sigma)."""
    _check_positive(dt, beta)
    grid, drift, sigma = coeffs
    y = float(y0)
    done = 0
    clamped = 0
    try:
        while done < max_steps:
            m = min(BLOCK_STEPS, max_steps - done)
            G = noise.normals(m)
            status, k, y, c = reduced_exit_block(grid, drift, sigma, y, dt, beta, G, level)
            clamped += c
            if status == DIVERGED:
                raise _diverged("reduced dynamics", done + k + 1)
            if status == EXITED:
                return done + k + 1
            done += m
        return None
    finally:
        if table is not None:
            table.stats.clamped += clamped


def simulate_full(model, x0, n_steps, dt, beta, seed, stream_id=0, stride=1):
    """Recorded full trajectory: returns (t, X) with X[0] = x0 and one row per ``stride`` steps."""
    _check_positive(dt, beta)
    kernel = _specialized("full_record", model.grad_fn)
    noise = NoiseStream(seed, stream_id, TAG_TRAJECTORY)
    x = np.array(x0, dtype=float)
    out = np.empty((n_steps // stride + 1, model.dimension))
    out[0] = x
    done = 0
    while done < n_steps:
        m = min(BLOCK_STEPS, n_steps - done)
        G = noise.normals((m, model.dimension))
        status, k = kernel(model.pvec, x, dt, beta, G, stride, done, out)
        if status == DIVERGED:
            raise _diverged("full dynamics", done + k + 1)
        done += m
    return dt * stride * np.arange(out.shape[0]), out


def simulate_reduced(table, y0, n_steps, dt, beta, seed, stream_id=0, stride=1, kind="effective"):
    """Recorded reduced trajectory with fresh noise: returns (t, y)."""
    _check_positive(dt, beta)
    grid, drift, sigma = reduced_coefficients(table, kind)
    noise = NoiseStream(seed, stream_id, TAG_REDUCED)
    out = np.empty(n_steps // stride + 1)
    out[0] = y = float(y0)
    done = 0
    while done < n_steps:
        m = min(BLOCK_STEPS, n_steps - done)
        status, k, y, c = reduced_record_block(grid, drift, sigma, y, dt, beta, noise.normals(m), stride, done, out)
        table.stats.clamped += c
        if status == DIVERGED:
            raise _diverged("reduced dynamics", done + k + 1)
        done += m
    return dt * stride * np.arange(out.shape[0]), out


@dataclass(frozen=True)
class CoupledTrajectory:
    t: np.ndarray
    xi: np.ndarray  # xi(X_t)
    y: np.ndarray  # reduced process driven by the projected noise
    x_final: np.ndarray

    @property
    def max_deviation(self):
        return float(np.max(np.abs(self.xi - self.y)))


def coupled_run(model, rc, table, x0, T, dt, beta, seed, stride=100, stream_id=0, kind="effective"):
    """Full trajectory from x0 and reduced trajectory from y0 = xi(x0), sharing one Brownian path.

    The reduced increment is the projection of the full increment on the unit
    normal grad xi / |grad xi| at the current full configuration.
    """
    _check_positive(dt, beta)
    n_steps = int(round(T / dt))
    stride = max(1, min(int(stride), max(n_steps, 1)))
    grid, drift, sigma = reduced_coefficients(table, kind)
    kernel = _specialized("coupled", model.grad_fn, rc.value_fn, rc.grad_fn)
    noise = NoiseStream(seed, stream_id, TAG_TRAJECTORY)
    x = np.array(x0, dtype=float)
    y = rc.value(x)
    n_rec = n_steps // stride + 1
    out_xi = np.empty(n_rec)
    out_y = np.empty(n_rec)
    out_xi[0] = out_y[0] = y
    done = 0
    while done < n_steps:
        m = min(BLOCK_STEPS, n_steps - done)
        G = noise.normals((m, model.dimension))
        status, k, y, c = kernel(model.pvec, rc.pvec, grid, drift, sigma, x, y, dt, beta, G, stride, done, out_xi, out_y)
        table.stats.clamped += c
        if status == DIVERGED:
            raise _diverged("coupled dynamics", done + k + 1)
        done += m
    return CoupledTrajectory(dt * stride * np.arange(n_rec), out_xi, out_y, x)
