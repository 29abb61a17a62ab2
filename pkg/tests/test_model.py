import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgdyn import model
from cgdyn.errors import NumericalError

from .oracles import OMEGA_B_EPS_AT_0

coord = st.floats(-2.0, 2.0, allow_nan=False)


def test_doublewell_special_points(doublewell):
    assert doublewell.potential(np.array([1.0, 0.0])) == 0.0
    assert doublewell.potential(np.array([0.0, 1.0])) == pytest.approx(1.0)
    np.testing.assert_array_equal(doublewell.gradient(np.array([1.0, 0.0])), [0.0, 0.0])


def test_doublewell_batch_matches_single(doublewell, rng):
    X = doublewell.sample_box(20, rng)
    np.testing.assert_allclose(doublewell.potential(X), [doublewell.potential(x) for x in X])
    np.testing.assert_allclose(doublewell.gradient(X), [doublewell.gradient(x) for x in X])


def test_xi2_values(xi2):
    assert xi2.value(np.array([1.0, 0.0])) == 1.0
    np.testing.assert_allclose(xi2.gradient(np.array([1.0, 0.0])), [1.0, -2.0])


@settings(max_examples=200, deadline=None)
@given(coord, coord)
def test_xi2_orthogonal_to_constraint(x, y):
    rc = model.builtin_xi2()
    p = np.array([x, y])
    u = np.dot(rc.gradient(p), rc.constraint_gradient(p))
    assert abs(u) <= 1e-12 * max(1.0, np.linalg.norm(rc.gradient(p)))


@settings(max_examples=50, deadline=None)
@given(coord, coord)
def test_xi1_unit_gradient(x, y):
    assert np.linalg.norm(model.builtin_xi1().gradient(np.array([x, y]))) == 1.0


@pytest.mark.parametrize("eps", [0.01, 1e-3])
def test_derivatives_match_finite_differences(eps, rng):
    for m, rc in [(model.builtin_doublewell(eps), model.builtin_xi2()), model.builtin_threeatom(eps),
                  model.builtin_omega_testcase(eps)]:
        X = m.sample_box(100, rng)
        assert model.gradient_fd_error(m.potential, m.gradient, X) < 1e-6
        assert model.hessian_fd_error(m.gradient, m.hessian, X) < 1e-6
        assert model.gradient_fd_error(rc.value, rc.gradient, X) < 1e-6
        assert model.hessian_fd_error(rc.gradient, rc.hessian, X) < 1e-6


def test_threeatom_equilibrium():
    m, theta = model.builtin_threeatom()
    th0 = 1.187
    x = model.threeatom_configuration(1.0, (np.cos(th0), np.sin(th0)))
    assert theta.value(x) == pytest.approx(th0, abs=1e-14)
    assert m.potential(x) == pytest.approx(0.0, abs=1e-24)


def test_threeatom_orthogonality(rng):
    m, theta = model.builtin_threeatom()
    X = m.sample_box(100, rng)
    for which in ("q", "q3"):
        u = np.sum(theta.gradient(X) * theta.constraint_gradient(X, which), axis=1)
        assert np.max(np.abs(u)) < 1e-8
    assert theta.constraint_names() == ["q", "q3"]


def test_threeatom_rejects_collapsed_configuration():
    with pytest.raises(NumericalError):
        model.check_threeatom_configuration([0.0, 1.0, 1.0])


def test_omega_limit_drift():
    assert model.omega_limit_drift(0.0, 1.0) == pytest.approx(-0.5)


def test_omega_exact_drift_against_quadrature_oracle():
    assert model.omega_exact_drift(0.0, 1e-3, 1.0) == pytest.approx(OMEGA_B_EPS_AT_0, rel=1e-12)


def test_omega_exact_drift_tends_to_limit():
    a = np.array([-1.0, 0.0, 1.0])
    errs = [np.abs(model.omega_exact_drift(a, e, 1.0) - model.omega_limit_drift(a, 1.0)) for e in (1e-2, 1e-3, 1e-4)]
    assert np.all(errs[1] < errs[0]) and np.all(errs[2] < errs[1])


def test_registry():
    m, rc = model.build("doublewell", "xi1", epsilon=0.05)
    assert m.params["epsilon"] == 0.05 and rc.name == "xi1"
    with pytest.raises((KeyError, ValueError)):
        model.build("nosuchmodel")


def test_chart_lies_on_level_set(xi2):
    s = np.linspace(-1.5, 1.5, 31)
    for z in (-3.0, -0.2, 0.0, 0.7, 5.0):
        np.testing.assert_allclose(xi2.value(xi2.levelset_param(z, s)), z, rtol=1e-12, atol=1e-12)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        model.builtin_doublewell(-1.0)
    with pytest.raises(ValueError):
        model.builtin_threeatom(ktheta=0.0)
