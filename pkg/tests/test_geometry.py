import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgdyn import geometry, model
from cgdyn.errors import NumericalError

from .oracles import DRIFT_XI2_AT_1_02, F_XI2_AT_1_0


def test_local_mean_force_xi1(doublewell, xi1):
    assert geometry.local_mean_force(doublewell, xi1, np.array([1.0, 0.0]), 3.0) == 0.0
    for beta in (0.5, 3.0):
        assert geometry.local_mean_force(doublewell, xi1, np.array([0.5, 0.5]), beta) == pytest.approx(-51.5)


def test_local_mean_force_xi2_fd_oracle(doublewell, xi2):
    assert geometry.local_mean_force(doublewell, xi2, np.array([1.0, 0.0]), 3.0) == pytest.approx(F_XI2_AT_1_0, rel=1e-6)


def test_drift_integrand(doublewell, xi1, xi2, rng):
    X = doublewell.sample_box(50, rng)
    np.testing.assert_allclose(geometry.drift_integrand(doublewell, xi1, X, 3.0), -doublewell.gradient(X)[:, 0])
    assert geometry.drift_integrand(doublewell, xi2, np.array([0.0, 1.0]), 3.0) == 0.0
    got = geometry.drift_integrand(doublewell, xi2, np.array([1.0, 0.2]), 3.0)
    assert got == pytest.approx(DRIFT_XI2_AT_1_02, rel=1e-6)


def test_project_noise(xi1, xi2):
    assert geometry.project_noise(xi2, np.array([0.0, 0.0]), [0.7, -0.3]) == pytest.approx(0.7)
    assert geometry.project_noise(xi1, np.array([0.4, -1.0]), [0.7, -0.3]) == 0.7


def test_project_noise_preserves_variance(xi2):
    G = np.random.default_rng(7).standard_normal((10**6, 2))
    x = np.tile([0.8, 0.3], (len(G), 1))
    v = geometry.project_noise(xi2, x, G).var()
    assert 0.995 <= v <= 1.005


def _zero_value(x, p):
    return 0.0


def _zero_grad(x, p, out):
    out[:] = 0.0


def _zero_hess(x, p, out):
    out[:, :] = 0.0


def test_singular_gradient_rejected(doublewell):
    flat = model.ReactionCoordinate("flat", _zero_value, _zero_grad, _zero_hess)
    with pytest.raises(NumericalError):
        geometry.local_mean_force(doublewell, flat, np.array([0.3, 0.2]), 3.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.0, 1.5))
def test_table_observables_consistent(x, y):
    m, rc = model.builtin_doublewell(0.01), model.builtin_xi2()
    p = np.array([[x, y]])
    out = geometry.table_observables(m, rc, 3.0)(p)[0]
    assert out[0] == pytest.approx(geometry.drift_integrand(m, rc, p, 3.0)[0], rel=1e-12, abs=1e-12)
    assert out[1] == pytest.approx(geometry.grad_norm_sq(rc, p)[0], rel=1e-12)
    assert out[2] == pytest.approx(geometry.local_mean_force(m, rc, p, 3.0)[0], rel=1e-12, abs=1e-9)
