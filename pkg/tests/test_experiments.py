import numpy as np
import pytest

from cgdyn import conditional as C
from cgdyn import experiments as E
from cgdyn import model
from cgdyn.errors import ConfigError, InsufficientSamplesError, NumericalError
from cgdyn.noise import TAG_AUX

from .oracles import MEAN_XI1_ABOVE_HALF

BETA = 3.0


@pytest.fixture(scope="module")
def xi1_wells(doublewell, xi1):
    return E.sample_well_initials(doublewell, xi1, 0.5, 2000, BETA, seed=0)


def test_well_initials_respect_threshold(xi1_wells, xi1):
    assert len(xi1_wells) == 2000
    assert np.all(xi1.value(xi1_wells.configs) > 0.5)
    assert 0.0 < xi1_wells.acceptance_fraction < 1.0


def test_well_initials_mean_matches_grid_quadrature(xi1_wells, xi1):
    v = xi1.value(xi1_wells.configs)
    se = v.std(ddof=1) / np.sqrt(len(v))
    assert abs(v.mean() - MEAN_XI1_ABOVE_HALF) < 3 * se


def test_well_initials_decorrelated(xi1_wells, doublewell, xi1):
    other = E.sample_well_initials(doublewell, xi1, 0.5, 2000, BETA, seed=1, stride=20_000)
    a, b = xi1.value(xi1_wells.configs), xi1.value(other.configs)
    se = np.hypot(a.std(ddof=1) / np.sqrt(len(a)), b.std(ddof=1) / np.sqrt(len(b)))
    assert abs(a.mean() - b.mean()) < 2 * se


def test_well_initials_exhausted(doublewell, xi1):
    with pytest.raises(InsufficientSamplesError):
        E.sample_well_initials(doublewell, xi1, 0.5, 100, BETA, seed=0, stride=100, max_steps=1000)


def test_residence_small_run(doublewell, xi1, xi1_wells, xi1_table):
    full = E.residence_time_study(doublewell, xi1, None, 0.5, 20, 1e-4, BETA, 0, "full", initials=xi1_wells)
    red = E.residence_time_study(doublewell, xi1, xi1_table, 0.5, 20, 1e-4, BETA, 0, "effective", initials=xi1_wells)
    fe = E.residence_time_study(doublewell, xi1, C.xi1_mean_force, 0.5, 20, 1e-4, BETA, 0, "free_energy", initials=xi1_wells)
    for r in (full, red, fe):
        assert r.n_traj == 20 and r.mean_tau > 0 and r.half_ci > 0
        assert r.interval[0] < r.mean_tau < r.interval[1]
    # xi1 has sigma = 1, so the effective and free-energy dynamics coincide
    assert red.mean_tau == pytest.approx(fe.mean_tau, rel=0.05)


def test_residence_censoring_is_an_error(doublewell, xi1, xi1_wells):
    with pytest.raises(NumericalError):
        E.residence_time_study(doublewell, xi1, None, 0.5, 5, 1e-4, BETA, 0, "full", initials=xi1_wells, max_steps=10)


def test_residence_needs_enough_initials(doublewell, xi1, xi1_wells):
    with pytest.raises(InsufficientSamplesError):
        E.residence_time_study(doublewell, xi1, None, 0.5, 5000, 1e-4, BETA, 0, "full", initials=xi1_wells)


def test_report_overlap():
    a = E.ResidenceReport(10, 30.0, 1.0, "full", 0.1, np.zeros(1))
    assert a.overlaps(E.ResidenceReport(10, 31.5, 1.0, "effective", 0.1, np.zeros(1)))
    assert not a.overlaps(E.ResidenceReport(10, 6.0, 1.0, "free_energy", 0.1, np.zeros(1)))


def test_pathwise_zero_horizon(doublewell, xi2, xi1_table):
    t, rms = E.pathwise_deviation(doublewell, xi2, xi1_table, np.array([1.0, 0.0]), 0.0, 1e-4, BETA, 10, 0)
    assert rms.max() == 0.0


def test_pathwise_xi1_does_not_decay(xi1, xi1_table):
    reps = E.pathwise_study(
        model.builtin_doublewell, xi1, lambda m: xi1_table, [1e-2, 1e-3], 10.0, {1e-2: 1e-4, 1e-3: 1e-5},
        BETA, 100, seed=0,
    )
    assert 0.5 <= reps[1].sup_rms / reps[0].sup_rms <= 2.0


def test_tv_distance_basics():
    rng = np.random.default_rng(0)
    a = rng.normal(size=1000)
    assert E.tv_distance(a, a)[0] == 0.0
    assert E.tv_distance(a, a + 100.0)[0] == pytest.approx(2.0)


def test_independent_reduced_ensembles_noise_floor(xi1_table):
    a = E.reduced_ensemble(xi1_table, 1.0, [1.0], 10_000, 1e-3, BETA, seed=0)[:, 0]
    b = E.reduced_ensemble(xi1_table, 1.0, [1.0], 10_000, 1e-3, BETA, seed=0, tag=TAG_AUX)[:, 0]
    c = E.reduced_ensemble(xi1_table, 1.0, [1.0], 10_000, 1e-3, BETA, seed=0)[:, 0]
    np.testing.assert_array_equal(a, c)
    assert E.tv_distance(a, b, 50)[0] < 0.1


def test_noise_floor_quantile():
    p = np.full(50, 1 / 50)
    f = E.noise_floor(p, 10_000, np.random.default_rng(0))
    assert 0.5 * np.sqrt(50 / 10_000) < f < 2 * np.sqrt(50 / 10_000)


def test_marginal_study_rejects_small_ensembles(doublewell, xi1, xi1_table):
    with pytest.raises(ConfigError):
        E.marginal_study(doublewell, xi1, xi1_table, [0.1], 50, 50, 1e-4, BETA, 0)


def test_checkpoints_must_be_multiples_of_dt(doublewell):
    with pytest.raises(ConfigError):
        E.full_ensemble(doublewell, np.array([1.0, 0.0]), [0.00015], 2, 1e-4, BETA, 0)


def test_orthogonality_checks(doublewell, xi1, xi2):
    z = [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert E.condition_cs1_check(doublewell, xi2, z) < 1e-12
    u1 = E.condition_cs1_check(doublewell, xi1, z)
    # u1 = 2x on the manifold, so its maximum is attained at the largest |z|
    assert u1 == pytest.approx(2.0, rel=1e-9)
    ta, theta = model.builtin_threeatom()
    assert E.condition_cs1_check(ta, theta, [1.0, 1.187, 1.3], fd=True) < 1e-6


def test_constrained_point(xi2):
    ta, theta = model.builtin_threeatom()
    for rc, z in ((xi2, 0.7), (theta, 1.05)):
        x = E.constrained_point(rc, z)
        assert rc.value(x) == pytest.approx(z, abs=1e-10)
        for name in rc.constraint_names():
            assert abs(rc.constraint(x, name)) < 1e-10


def test_drift_limit_errors_shape():
    errs = E.drift_limit_errors(model.builtin_omega_testcase, lambda a: model.omega_limit_drift(a, 1.0),
                                [2e-3, 1e-3], [-1.0, 0.0, 1.0], 1.0)
    assert errs.shape == (2, 3) and np.all(errs[1] < errs[0])


def test_stationary_bin_probabilities(xi1_table):
    p = E.stationary_bin_probabilities(xi1_table, np.linspace(-2, 2, 41))
    assert p.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(p, p[::-1], atol=1e-6)
