import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postres.data import ExperimentalSample
from postres.estimators import (METHODS, all_estimates, covariate_adjusted_weighted, covariate_adjusted_wls,
                                difference_in_means, hajek_weighted, hc2_sandwich_se, post_residualized_weighted,
                                post_residualized_wls, weighted_least_squares)
from postres.exceptions import DegenerateArm, RankDeficient
from postres.residualizer import ResidualizerSpec, fit_residualizer, predict_experiment, zero_model
from postres.weights import estimate_weights

from conftest import make_pair


@pytest.fixture
def fitted(pair):
    exp, pop = pair
    w = estimate_weights(exp, pop)
    yhat = predict_experiment(fit_residualizer(ResidualizerSpec("ols-int"), pop), exp)
    return exp, w.weights, yhat


def hc2_loop(D, w, r):
    A = np.linalg.inv(D.T @ (w[:, None] * D))
    meat = np.zeros_like(A)
    for i in range(len(w)):
        h = min(w[i] * D[i] @ A @ D[i], 1 - 1e-10)
        meat += w[i] ** 2 * r[i] ** 2 / (1 - h) * np.outer(D[i], D[i])
    return np.sqrt(np.diag(A @ meat @ A))


def test_dim_by_hand():
    exp = ExperimentalSample(np.zeros((6, 1)) + np.arange(6)[:, None], ("a",), np.array([1, 1, 1, 0, 0, 0.0]),
                             np.array([3, 4, 5, 1, 1, 4.0]))
    r = difference_in_means(exp)
    assert r.tau_hat == pytest.approx(2.0)
    assert r.se == pytest.approx(np.sqrt(1 / 3 + 3 / 3))
    assert r.ci[0] == pytest.approx(2 - 1.959963984540054 * r.se)


def test_hajek_by_hand():
    exp = ExperimentalSample(np.arange(4.0)[:, None], ("a",), np.array([1, 1, 0, 0.0]), np.array([1, 3, 0, 2.0]))
    r = hajek_weighted(exp, np.array([1, 3, 1, 1.0]))
    assert r.tau_hat == pytest.approx((1 + 9) / 4 - 1)


def test_hc2_matches_loop(fitted):
    exp, w, _ = fitted
    w = w / w.mean()
    D = np.column_stack([np.ones(exp.n), exp.treatment, exp.covariates])
    coef = np.linalg.lstsq(D * np.sqrt(w)[:, None], exp.outcome * np.sqrt(w), rcond=None)[0]
    r = exp.outcome - D @ coef
    assert np.allclose(hc2_sandwich_se(D, w, r), hc2_loop(D, w, r), rtol=1e-10)


def test_wls_se_matches_statsmodels(fitted):
    sm = pytest.importorskip("statsmodels.api")
    exp, w, _ = fitted
    w = w / w.mean()
    D = np.column_stack([np.ones(exp.n), exp.treatment, exp.covariates])
    ref = sm.WLS(exp.outcome, D, weights=w).fit(cov_type="HC2")
    r = weighted_least_squares(exp, w)
    assert r.tau_hat == pytest.approx(ref.params[1], abs=1e-12)
    assert r.se == pytest.approx(ref.bse[1], rel=1e-9)


def test_zero_residualizer_gives_plain_estimates(fitted):
    exp, w, _ = fitted
    zero = zero_model(exp.covariate_names)
    assert post_residualized_weighted(exp, w, zero).tau_hat == hajek_weighted(exp, w).tau_hat
    assert post_residualized_weighted(exp, w, zero).se == hajek_weighted(exp, w).se
    assert post_residualized_wls(exp, w, zero).tau_hat == weighted_least_squares(exp, w).tau_hat


def test_empty_adjustment_set_gives_weighted(fitted):
    exp, w, yhat = fitted
    none = np.zeros((exp.n, 0))
    a = weighted_least_squares(exp, w, none)
    b = hajek_weighted(exp, w)
    assert (a.tau_hat, a.se) == (b.tau_hat, b.se)
    c = post_residualized_wls(exp, w, extra_covariates=none, yhat=yhat)
    d = post_residualized_weighted(exp, w, yhat=yhat)
    assert abs(c.tau_hat - d.tau_hat) <= 1e-12


def test_unit_coefficient_gives_residualized(fitted):
    exp, w, yhat = fitted
    a = covariate_adjusted_weighted(exp, w, yhat=yhat, fixed_beta=1.0)
    b = post_residualized_weighted(exp, w, yhat=yhat)
    assert abs(a.tau_hat - b.tau_hat) <= 1e-12 and abs(a.se - b.se) <= 1e-12
    c = covariate_adjusted_wls(exp, w, yhat=yhat, fixed_beta=1.0)
    d = post_residualized_wls(exp, w, yhat=yhat)
    assert abs(c.tau_hat - d.tau_hat) <= 1e-12


def test_uniform_weights_give_dim(pair):
    exp, _ = pair
    assert hajek_weighted(exp, np.ones(exp.n)).tau_hat == difference_in_means(exp).tau_hat


def test_covariate_variant_reports_beta(fitted):
    exp, w, yhat = fitted
    r = covariate_adjusted_weighted(exp, w, yhat=yhat)
    assert r.beta_hat == pytest.approx(1.0, abs=0.1)
    assert "beta_hat" in r.to_dict()


def test_constant_prediction_rejected_as_covariate(pair):
    exp, _ = pair
    with pytest.raises(RankDeficient):
        covariate_adjusted_weighted(exp, np.ones(exp.n), yhat=np.full(exp.n, 2.0))


def test_single_treated_unit():
    T = np.zeros(10)
    T[0] = 1
    exp = ExperimentalSample(np.arange(10.0)[:, None], ("a",), T, np.arange(10.0))
    with pytest.raises(DegenerateArm):
        hajek_weighted(exp, np.ones(10))


def test_all_estimates_returns_every_method(fitted):
    exp, w, yhat = fitted
    out = all_estimates(exp, w, yhat=yhat)
    assert tuple(out) == METHODS
    for r in out.values():
        assert r.ci[0] < r.tau_hat < r.ci[1]
        assert r.n_treated + r.n_control == r.n


def test_residualizing_tightens_se_with_a_good_model(fitted):
    exp, w, yhat = fitted
    assert post_residualized_weighted(exp, w, yhat=yhat).se < 0.5 * hajek_weighted(exp, w).se


@pytest.mark.parametrize("c", [2.0, 0.25, 1024.0])
def test_weight_scale_invariance_power_of_two(fitted, c):
    exp, w, yhat = fitted
    a = all_estimates(exp, w, yhat=yhat)
    b = all_estimates(exp, w * c, yhat=yhat)
    for m in METHODS:
        assert a[m].tau_hat == b[m].tau_hat and a[m].se == b[m].se


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_weight_scale_invariance(c):
    exp, pop = make_pair(seed=2, n=120, N=400)
    w = estimate_weights(exp, pop).weights
    yhat = exp.covariates @ np.array([1.0, 2.0]) + exp.covariates[:, 0] * exp.covariates[:, 1]
    a = all_estimates(exp, w, yhat=yhat)
    b = all_estimates(exp, w * c, yhat=yhat)
    for m in METHODS:
        assert abs(a[m].tau_hat - b[m].tau_hat) <= 1e-12 * max(1.0, abs(a[m].tau_hat))
        assert abs(a[m].se - b[m].se) <= 1e-12 * max(1.0, a[m].se)


def test_weights_length_checked(pair):
    exp, _ = pair
    with pytest.raises(ValueError):
        hajek_weighted(exp, np.ones(exp.n + 1))
