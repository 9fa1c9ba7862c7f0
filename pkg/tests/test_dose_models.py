import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobdose.dose_models import (DomainError, DoseResponseSpec, FitError, Family, bspline_basis,
                                 estimate_med, fit_emax, fit_linear, fit_model, log_likelihood,
                                 treatment_effect, emax_curve)

from oracles import cox_de_boor, emax_least_squares, emax_nll, ols

LEVELS = (0.0, 12.5, 25.0, 50.0, 100.0)


def balanced_doses(per_level=10, levels=LEVELS):
    return np.repeat(np.asarray(levels), per_level)


# ---------------------------------------------------------------------------
# DoseResponseSpec
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("levels", [(12.5, 25.0), (0.0, 25.0, 12.5), (0.0, 0.0, 1.0), (0.0,)])
def test_spec_rejects_bad_levels(levels):
    with pytest.raises(ValueError):
        DoseResponseSpec.emax(levels)


def test_spec_parameter_counts():
    assert DoseResponseSpec.emax(LEVELS).n_params == 3
    assert DoseResponseSpec.bspline(LEVELS).n_params == 4
    assert DoseResponseSpec.means(LEVELS).n_theta == len(LEVELS) - 1


def test_default_knot_is_median_of_active_levels():
    assert DoseResponseSpec.bspline(LEVELS).interior_knots == (37.5,)


def test_bspline_spec_rejects_knot_outside_range():
    with pytest.raises(ValueError):
        DoseResponseSpec.bspline(LEVELS, knot=100.0)


# ---------------------------------------------------------------------------
# B-spline basis
# ---------------------------------------------------------------------------

def test_basis_is_zero_at_placebo():
    spec = DoseResponseSpec.bspline(LEVELS)
    np.testing.assert_array_equal(bspline_basis(0.0, spec), [0.0, 0.0, 0.0])


def test_basis_at_interior_knot_matches_de_boor():
    spec = DoseResponseSpec.bspline((0.0, 25.0, 50.0, 100.0), knot=50.0)
    got = bspline_basis(50.0, spec)
    want = cox_de_boor(50.0, [0, 0, 0, 50, 100, 100, 100], 2)[1:]
    np.testing.assert_allclose(got, want, atol=1e-14)
    # hand value: the two middle functions meet at one half
    np.testing.assert_allclose(got, [0.5, 0.5, 0.0], atol=1e-14)


@given(st.floats(0.0, 100.0))
def test_basis_matches_de_boor_everywhere(x):
    spec = DoseResponseSpec.bspline(LEVELS)
    full = cox_de_boor(x, spec.knot_vector, 2)
    np.testing.assert_allclose(bspline_basis(x, spec), full[1:], atol=1e-12)
    assert math.isclose(full.sum(), 1.0, abs_tol=1e-12)


@pytest.mark.parametrize("d", [-1.0, 100.5, math.nan])
def test_basis_rejects_out_of_domain(d):
    with pytest.raises(DomainError):
        bspline_basis(d, DoseResponseSpec.bspline(LEVELS))


# ---------------------------------------------------------------------------
# Emax fitting
# ---------------------------------------------------------------------------

def test_emax_noiseless_recovery():
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses()
    y = 1.2 + emax_curve(d, 0.17, 18.0)
    m = fit_emax(y, d, spec)
    np.testing.assert_allclose(m.params, [1.2, 0.17, 18.0], rtol=1e-4)
    assert m.rss < 1e-12 * (y @ y)


def test_emax_matches_generic_optimizer():
    rng = np.random.default_rng(3)
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses(20)
    y = 1.2 + emax_curve(d, 0.17, 18.0) + 0.12 * rng.standard_normal(d.size)
    m = fit_emax(y, d, spec)
    params, rss = emax_least_squares(y, d, 100.0)
    assert m.rss <= rss * (1 + 1e-9)
    np.testing.assert_allclose(m.params, params, rtol=1e-4)


def test_emax_theta2_respects_bounds():
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses()
    y = 1.0 + 0.5 * d / 100.0                    # linear: theta2 wants to be infinite
    m = fit_emax(y, d, spec)
    assert 0.1 <= m.theta[1] <= 150.0
    assert m.theta[1] == pytest.approx(150.0, rel=1e-6)


def test_emax_profile_property():
    rng = np.random.default_rng(11)
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses(30)
    y = 0.5 + emax_curve(d, 0.3, 10.0) + 0.1 * rng.standard_normal(d.size)
    m = fit_emax(y, d, spec)
    X = np.column_stack([np.ones_like(d), d / (m.theta[1] + d)])
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose([m.beta0, m.theta[0]], beta, rtol=1e-10, atol=1e-12)


def test_emax_is_deterministic():
    rng = np.random.default_rng(5)
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses(15)
    y = 1.0 + emax_curve(d, 0.2, 30.0) + 0.2 * rng.standard_normal(d.size)
    a, b = fit_emax(y, d, spec), fit_emax(y.copy(), d.copy(), spec)
    assert a.params.tobytes() == b.params.tobytes()


def test_emax_half_maximal_dose():
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses()
    m = fit_emax(1.0 + emax_curve(d, 0.4, 20.0), d, spec)
    assert treatment_effect(m, m.theta[1]) == pytest.approx(m.theta[0] / 2, rel=1e-12)
    assert treatment_effect(m, 0.0) == 0.0


def test_rss_and_score_invariants():
    rng = np.random.default_rng(8)
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses(20)
    y = 1.2 + emax_curve(d, 0.17, 18.0) + 0.12 * rng.standard_normal(d.size)
    m = fit_emax(y, d, spec)
    resid = y - m.predict(d)
    assert m.rss == pytest.approx(resid @ resid, rel=1e-10)
    assert m.sigma == pytest.approx(math.sqrt(m.rss / (d.size - 3)))
    S = m.score_matrix
    assert S.shape == (d.size, 3)
    assert np.all(np.abs(S.sum(axis=0)) / S.std(axis=0) < 1e-6 * d.size)


def _fd_scores(params, y, d, sigma, h=1e-6):
    out = np.empty((y.size, 3))
    for j in range(3):
        step = h * max(1.0, abs(params[j]))
        up, dn = np.array(params, float), np.array(params, float)
        up[j] += step
        dn[j] -= step
        out[:, j] = (emax_nll(up, y, d, sigma) - emax_nll(dn, y, d, sigma)) / (2 * step)
    return out


def test_emax_scores_match_finite_differences():
    from mobdose.dose_models import FittedDoseModel, _finish

    rng = np.random.default_rng(21)
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses(10)
    y = 1.2 + emax_curve(d, 0.17, 18.0) + 0.12 * rng.standard_normal(d.size)
    m = fit_emax(y, d, spec)
    points = [m.params] + [m.params * (1 + 0.2 * rng.standard_normal(3)) for _ in range(10)]
    for p in points:
        p[2] = abs(p[2])
        model: FittedDoseModel = _finish(spec, y, d, p[0], p[1:])
        fd = _fd_scores(p, y, d, model.sigma)
        scale = np.abs(fd).max(axis=0)
        np.testing.assert_array_less(np.abs(model.score_matrix - fd) / scale, 1e-5)


def test_fit_errors():
    spec = DoseResponseSpec.emax(LEVELS)
    with pytest.raises(FitError, match="two distinct dose levels"):
        fit_emax(np.ones(10), np.full(10, 25.0), spec)
    with pytest.raises(FitError):
        fit_emax(np.ones(3), np.array([0.0, 25.0, 50.0]), spec)


# ---------------------------------------------------------------------------
# Linear families
# ---------------------------------------------------------------------------

def test_means_are_cell_mean_differences():
    rng = np.random.default_rng(2)
    spec = DoseResponseSpec.means(LEVELS)
    d = balanced_doses(12)
    y = rng.standard_normal(d.size)
    m = fit_linear(y, d, spec)
    cell = np.array([y[d == lv].mean() for lv in LEVELS])
    np.testing.assert_allclose(m.theta, cell[1:] - cell[0], atol=1e-12)
    np.testing.assert_allclose(m.beta0, cell[0], atol=1e-12)


def test_means_rank_deficiency_is_a_fit_error():
    spec = DoseResponseSpec.means(LEVELS)
    d = balanced_doses(5, LEVELS[:4])
    with pytest.raises(FitError, match="rank deficient"):
        fit_linear(np.arange(d.size, dtype=float), d, spec)


@pytest.mark.parametrize("family", ["bspline", "means"])
def test_linear_residuals_orthogonal_to_design(family):
    from mobdose.dose_models import mean_gradient

    rng = np.random.default_rng(4)
    spec = getattr(DoseResponseSpec, family)(LEVELS)
    d = balanced_doses(9)
    y = rng.standard_normal(d.size)
    m = fit_linear(y, d, spec)
    X = mean_gradient(spec, m.theta, d)
    resid = y - m.predict(d)
    inner = X.T @ resid / (np.linalg.norm(X, axis=0) * np.linalg.norm(resid))
    np.testing.assert_array_less(np.abs(inner), 1e-8)


def test_bspline_matches_least_squares_oracle():
    spec = DoseResponseSpec.bspline(LEVELS)
    d = balanced_doses(4)
    rng = np.random.default_rng(9)
    y = 0.3 + rng.standard_normal(d.size)
    m = fit_linear(y, d, spec)
    rows = np.array([cox_de_boor(x, spec.knot_vector, 2)[1:] for x in d])
    beta = ols(np.column_stack([np.ones_like(d), rows]), y)
    np.testing.assert_allclose(m.params, beta, rtol=1e-8, atol=1e-10)


def test_bspline_approximates_shallow_emax_curve():
    # with the knot at 37.5 a quadratic spline tracks a gently curved Emax within 2%
    spec = DoseResponseSpec.bspline(LEVELS)
    d = balanced_doses(4)
    theta1 = 0.17
    y = 1.2 + emax_curve(d, theta1, 90.0)
    m = fit_linear(y, d, spec)
    err = np.abs(m.predict(np.asarray(LEVELS)) - (1.2 + emax_curve(np.asarray(LEVELS), theta1, 90.0)))
    assert err.max() < 0.02 * theta1


@pytest.mark.parametrize("family", ["emax", "bspline", "means"])
def test_noiseless_refit_has_tiny_rss(family):
    spec = getattr(DoseResponseSpec, family)(LEVELS)
    d = balanced_doses(6)
    if spec.family is Family.EMAX:
        truth = np.array([0.7, 0.25, 12.0])
    else:
        truth = np.r_[0.7, np.linspace(0.05, 0.3, spec.n_theta)]
    from mobdose.dose_models import FittedDoseModel

    gen = FittedDoseModel(spec, truth[0], truth[1:], 1.0, 0.0, 1)
    y = gen.predict(d)
    m = fit_model(y, d, spec)
    assert m.rss < 1e-12 * (y @ y)


# ---------------------------------------------------------------------------
# Effects, MED and likelihood
# ---------------------------------------------------------------------------

def _emax_model(theta1, theta2, beta0=0.0):
    from mobdose.dose_models import FittedDoseModel

    return FittedDoseModel(DoseResponseSpec.emax(LEVELS), beta0, np.array([theta1, theta2]),
                           1.0, 1.0, 10)


def test_effect_at_theta2_is_half_maximum():
    assert treatment_effect(_emax_model(0.17, 18.0), 18.0) == pytest.approx(0.085, abs=1e-15)


def test_effect_refuses_extrapolation():
    with pytest.raises(DomainError):
        treatment_effect(_emax_model(0.17, 18.0), 120.0)


def test_means_interpolation_exact_at_levels():
    rng = np.random.default_rng(6)
    spec = DoseResponseSpec.means(LEVELS)
    d = balanced_doses(5)
    m = fit_linear(rng.standard_normal(d.size), d, spec)
    np.testing.assert_array_equal(m.effect(np.asarray(LEVELS)), np.r_[0.0, m.theta])
    mid = m.effect(np.array([6.0, 37.5, 75.0]))
    assert np.all(np.isfinite(mid))


@pytest.mark.parametrize("theta,expected", [((0.2, 18.0), 18.0), ((0.17, 18.0), 1.8 / 0.07)])
def test_emax_med_analytic(theta, expected):
    assert estimate_med(_emax_model(*theta), 0.1) == pytest.approx(expected, rel=1e-12)


def test_med_reference_values_frozen():
    assert estimate_med(_emax_model(0.17, 18.0), 0.1) == pytest.approx(25.714285714285715, abs=1e-9)


def test_med_absent_below_threshold():
    assert estimate_med(_emax_model(0.1, 18.0), 0.1) is None
    assert estimate_med(_emax_model(0.05, 18.0), 0.1) is None


def test_med_absent_beyond_dose_range():
    # reaches 0.1 only at d = 180
    assert estimate_med(_emax_model(0.15, 90.0), 0.1) is None


def test_med_grid_for_linear_family():
    spec = DoseResponseSpec.means(LEVELS)
    d = balanced_doses(4)
    y = np.select([d == lv for lv in LEVELS], [0.0, 0.05, 0.11, 0.2, 0.3])
    m = fit_linear(y, d, spec)
    med = estimate_med(m, 0.1)
    grid = np.linspace(0, 100, 1001)
    first = grid[np.nonzero(m.effect(grid) >= 0.1)[0][0]]
    assert med == first
    assert 12.5 < med <= 25.0


def test_loglik_training_identity():
    rng = np.random.default_rng(12)
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses(20)
    y = 1.2 + emax_curve(d, 0.17, 18.0) + 0.12 * rng.standard_normal(d.size)
    m = fit_emax(y, d, spec)
    n = d.size
    expected = -(n / 2) * (math.log(2 * math.pi * m.rss / n) + 1)
    assert log_likelihood(m, y, d) == pytest.approx(expected, rel=1e-12)


def test_loglik_prefers_smaller_prediction_error():
    rng = np.random.default_rng(13)
    d = balanced_doses(40)
    y = 1.0 + emax_curve(d, 0.2, 20.0) + 0.1 * rng.standard_normal(d.size)
    good, bad = _emax_model(0.2, 20.0, 1.0), _emax_model(0.3, 20.0, 1.0)
    assert log_likelihood(good, y, d) > log_likelihood(bad, y, d)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(1.0, 140.0), st.floats(-2.0, 2.0))
def test_emax_recovery_property(theta1, theta2, beta0):
    spec = DoseResponseSpec.emax(LEVELS)
    d = balanced_doses(3)
    y = beta0 + emax_curve(d, theta1, theta2)
    m = fit_emax(y, d, spec)
    # identifiability on five doses is good enough for the fitted curve
    np.testing.assert_allclose(m.predict(np.asarray(LEVELS)),
                               beta0 + emax_curve(np.asarray(LEVELS), theta1, theta2),
                               atol=1e-7 * max(1.0, abs(beta0) + theta1))
