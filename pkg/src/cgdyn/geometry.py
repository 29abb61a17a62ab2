"""Differential quantities built from a reaction coordinate.

All functions accept a single configuration of shape (n,) or a batch (N, n);
results are scalars or arrays of shape (N,) accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class DerivativeBundle:
    grad_xi: np.ndarray
    laplacian_xi: np.ndarray | float
    div_grad_over_sq: np.ndarray | float  # div(grad xi / |grad xi|^2)
    grad_norm: np.ndarray | float


def _checked_norm(g):
    norm = np.linalg.norm(g, axis=-1)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise NumericalError("|grad xi| vanishes or is not finite; the reaction coordinate must be regular")
    return norm


def derivative_bundle(rc, x) -> DerivativeBundle:
    g = rc.gradient(x)
    H = rc.hessian(x)
    norm = _checked_norm(g)
    lap = np.trace(H, axis1=-2, axis2=-1)
    gHg = np.einsum("...i,...ij,...j->...", g, H, g)
    div = lap / norm**2 - 2.0 * gHg / norm**4
    if np.ndim(norm) == 0:
        return DerivativeBundle(g, float(lap), float(div), float(norm))
    return DerivativeBundle(g, lap, div, norm)


def local_mean_force(model, rc, x, beta):
    """F = grad V . grad xi / |grad xi|^2 - beta^-1 div(grad xi / |grad xi|^2)."""
    d = derivative_bundle(rc, x)
    gV = model.gradient(x)
    return np.sum(gV * d.grad_xi, axis=-1) / d.grad_norm**2 - d.div_grad_over_sq / beta


def drift_integrand(model, rc, x, beta):
    """Ito drift of xi(X_t): -grad V . grad xi + beta^-1 laplacian xi."""
    g = rc.gradient(x)
    lap = np.trace(rc.hessian(x), axis1=-2, axis2=-1)
    return -np.sum(model.gradient(x) * g, axis=-1) + lap / beta


def grad_norm_sq(rc, x):
    g = rc.gradient(x)
    return np.sum(g * g, axis=-1)


def project_noise(rc, x, dW):
    """Project an n-dimensional increment onto the unit normal grad xi / |grad xi|."""
    g = rc.gradient(x)
    norm = _checked_norm(g)
    return np.sum(g * np.asarray(dW, dtype=float), axis=-1) / norm


def table_observables(model, rc, beta):
    """Batch observable returning columns (drift integrand, |grad xi|^2, local mean force).

    Shares one evaluation of the derivatives between the three quantities.
    """

    def observe(X):
        X = np.atleast_2d(X)
        d = derivative_bundle(rc, X)
        gV = model.gradient(X)
        gVg = np.sum(gV * d.grad_xi, axis=-1)
        nsq = d.grad_norm**2
        out = np.empty((X.shape[0], 3))
        out[:, 0] = -gVg + d.laplacian_xi / beta
        out[:, 1] = nsq
        out[:, 2] = gVg / nsq - d.div_grad_over_sq / beta
        return out

    return observe
