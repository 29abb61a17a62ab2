import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgdyn import conditional as C
from cgdyn import geometry, model
from cgdyn.errors import NumericalError

from .oracles import SIGMA2_XI2_AT_0, SIGMA2_XI2_AT_0_EXACT

BETA = 3.0


def ones(X):
    return np.ones(len(X))


# --- quadrature engine ------------------------------------------------------------


@pytest.mark.parametrize("z", [-1.0, 0.0, 0.3, 2.5])
def test_quadrature_normalisation(doublewell, xi2, z):
    assert C.conditional_expectation_quadrature(doublewell, xi2, ones, z, BETA).value == pytest.approx(1.0, abs=1e-12)


def test_quadrature_constant_observable_xi1(doublewell, xi1):
    for z in (-1.2, 0.0, 0.8):
        est = C.conditional_expectation_quadrature(doublewell, xi1, lambda X: geometry.grad_norm_sq(xi1, X), z, BETA)
        assert est.value == pytest.approx(1.0, abs=1e-12)


def test_quadrature_sigma2_xi2_riemann_oracle(doublewell, xi2):
    assert SIGMA2_XI2_AT_0 == pytest.approx(SIGMA2_XI2_AT_0_EXACT, rel=1e-9)
    est = C.conditional_expectation_quadrature(doublewell, xi2, lambda X: geometry.grad_norm_sq(xi2, X), 0.0, BETA)
    assert est.value == pytest.approx(SIGMA2_XI2_AT_0, rel=1e-4)


def test_fused_point_matches_generic(doublewell, xi2):
    obs = geometry.table_observables(doublewell, xi2, BETA)
    for z in (-0.7, 0.05, 1.3):
        a = C.table_point_quadrature(doublewell, xi2, z, BETA).value
        b = C.conditional_expectation_quadrature(doublewell, xi2, obs, z, BETA).value
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)


def test_omega_quadrature_matches_closed_form():
    m, rc = model.builtin_omega_testcase(1e-3)
    for a in (-1.0, 0.0, 1.0):
        b = C.table_point_quadrature(m, rc, a, 1.0).value[0]
        assert b == pytest.approx(float(model.omega_exact_drift(a, 1e-3, 1.0)), abs=1e-9)


def test_quadrature_needs_chart():
    m, theta = model.builtin_threeatom()
    with pytest.raises(ValueError):
        C.conditional_expectation_quadrature(m, theta, ones, 1.187, 1.0)


def test_quadrature_far_outside_chart_raises(doublewell, xi1):
    with pytest.raises(NumericalError):
        C.conditional_expectation_quadrature(doublewell, xi1, ones, 40.0, BETA)


# --- Monte Carlo engine -------------------------------------------------------------


def test_projection_xi1_resets_x(xi1):
    np.testing.assert_allclose(C.project_onto_levelset(xi1, [0.3, -0.8], 1.1), [1.1, -0.8], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.5), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_projection_lands_on_level_set(z, s, dx, dy):
    rc = model.builtin_xi2()
    x = rc.levelset_param(z, s) + np.array([dx, dy])
    p = C.project_onto_levelset(rc, x, z)
    assert abs(rc.value(p) - z) <= 1e-11 * (1 + abs(z))


def test_projection_failure_is_reported(xi2):
    with pytest.raises(NumericalError):
        C.project_onto_levelset(xi2, [-1.0, 0.0], 1.0)


def test_mc_sigma2_xi2_agrees_with_quadrature(doublewell, xi2):
    obs = lambda X: geometry.grad_norm_sq(xi2, X)
    mc = C.conditional_expectation_mc(doublewell, xi2, obs, 0.0, BETA, 400_000, 1e-4, seed=3)
    q = C.conditional_expectation_quadrature(doublewell, xi2, obs, 0.0, BETA).value
    assert abs(mc.value - q) < 3 * mc.std_error
    assert mc.std_error < 0.05 * q


def test_mc_threeatom_mean_force_vanishes_at_equilibrium_angle():
    m, theta = model.builtin_threeatom(1e-3)
    obs = lambda X: geometry.local_mean_force(m, theta, X, 1.0)
    est = C.conditional_expectation_mc(m, theta, obs, 1.187, 1.0, 400_000, 1e-4, seed=0)
    assert abs(est.value) < 3 * est.std_error


def test_ratio_blocks_iid():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(100_000) + 2.0
    value, se = C._ratio_blocks(x, np.ones_like(x), 100)
    assert value == pytest.approx(x.mean())
    assert se == pytest.approx(1 / np.sqrt(len(x)), rel=0.2)


# --- tables ---------------------------------------------------------------------


def test_grid_nodes():
    nodes = C.XI2_GRID.nodes()
    assert len(nodes) == 4115
    assert nodes[0] == -200.0 and nodes[-1] == 200.0
    fine = nodes[(nodes >= -0.3) & (nodes <= 0.3)]
    np.testing.assert_allclose(np.diff(fine), 5e-3, rtol=1e-9)
    assert np.all(np.diff(nodes) > 0)


def test_xi1_quadrature_table(doublewell, xi1):
    tab = C.build_coefficient_table(doublewell, xi1, BETA, C.GridSpec(-1.5, 1.5, 0.25))
    i = int(np.argmin(np.abs(tab.grid - 0.5)))
    assert tab.b[i] == pytest.approx(1.5, abs=1e-9)
    np.testing.assert_allclose(tab.sigma, 1.0, atol=1e-12)
    np.testing.assert_allclose(tab.b, -tab.b[::-1], atol=1e-10)
    np.testing.assert_allclose(tab.aprime, C.xi1_mean_force(tab.grid), atol=1e-8)


def test_xi2_table_symmetry(doublewell, xi2):
    tab = C.build_coefficient_table(doublewell, xi2, BETA, np.linspace(-2, 2, 17))
    np.testing.assert_allclose(tab.b, -tab.b[::-1], atol=1e-8)
    np.testing.assert_allclose(tab.aprime, -tab.aprime[::-1], atol=1e-8)
    np.testing.assert_allclose(tab.sigma, tab.sigma[::-1], rtol=1e-8)


def test_mc_table_carries_errors(doublewell, xi2):
    tab = C.build_coefficient_table(doublewell, xi2, BETA, [0.0, 0.5], engine="mc", n_steps=20_000)
    assert tab.b_err is not None and np.all(tab.sigma_err > 0)


def test_table_validation():
    with pytest.raises(ValueError):
        C.CoefficientTable(np.array([0.0, 1.0]), np.zeros(2), np.array([1.0, -1.0]), np.zeros(2), 1.0)
    with pytest.raises(ValueError):
        C.CoefficientTable(np.array([1.0, 0.0]), np.zeros(2), np.ones(2), np.zeros(2), 1.0)


def test_stationarity(xi1_table):
    fine = C.xi1_analytic_table(BETA, C.GridSpec(-3, 3, 2e-4).nodes())
    assert C.check_stationarity(fine) < 1e-6
    assert C.check_stationarity(fine.with_columns(sigma=2 * fine.sigma)) > 0.5


def test_stationarity_xi2_refined_window(doublewell, xi2):
    tab = C.build_coefficient_table(doublewell, xi2, BETA, np.round(np.arange(-0.3, 0.30001, 5e-3), 10))
    assert C.check_stationarity(tab) < 1e-2


def test_interpolation(xi1_table):
    tab = C.xi1_analytic_table(BETA, C.GridSpec(-2, 2, 0.1).nodes())
    b, s, a = C.interpolate(tab, tab.grid[7])
    assert (b, s, a) == (tab.b[7], tab.sigma[7], tab.aprime[7])
    mid = 0.5 * (tab.grid[7] + tab.grid[8])
    assert C.interpolate(tab, mid)[0] == pytest.approx(0.5 * (tab.b[7] + tab.b[8]), rel=1e-14)
    # |b''| = 24 |z| <= 7.2 on the cell [0.2, 0.3]
    assert abs(C.interpolate(tab, 0.25)[0] + C.xi1_mean_force(0.25)) <= 7.2 * 0.1**2 / 8


def test_interpolation_clamps_and_counts():
    tab = C.xi1_analytic_table(BETA, C.GridSpec(-2, 2, 0.1).nodes())
    before = tab.stats.clamped
    assert C.interpolate(tab, 5.0)[0] == tab.b[-1]
    assert tab.stats.clamped == before + 1


def test_table_round_trip(tmp_path):
    tab = C.xi1_analytic_table(BETA, C.GridSpec(-1, 1, 0.05).nodes())
    path = tmp_path / "t.csv"
    C.write_table(tab, path, header=["model = doublewell"])
    back = C.read_table(path)
    assert back.beta == BETA
    for k in ("grid", "b", "sigma", "aprime"):
        np.testing.assert_array_equal(getattr(back, k), getattr(tab, k))


def test_free_energy_anchor():
    tab = C.xi1_analytic_table(BETA, C.GridSpec(-1.5, 1.5, 1e-3).nodes())
    A = tab.free_energy
    assert A[0] == 0.0
    exact = (tab.grid**2 - 1) ** 2
    np.testing.assert_allclose(A - A[0], exact - exact[0], atol=1e-5)
