"""Point estimators for the PATE and their HC2 standard errors.

Seven estimators share two building blocks: the Hajek weighted difference in
means (optionally on residualized outcomes) and a weighted regression whose
treatment coefficient is the estimate.  Weights are renormalised to mean one
on entry, so every estimator ignores the scale of ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import _kernels
from ._linalg import wls
from .data import ExperimentalSample
from .exceptions import DegenerateArm, RankDeficient
from .residualizer import FittedResidualizer, predict_experiment

METHODS = ("DiM", "W", "W_res", "W_cov", "wLS", "wLS_res", "wLS_cov")


@dataclass(frozen=True)
class EstimateResult:
    method: str
    tau_hat: float
    se: float
    ci: tuple
    level: float
    n: int
    n_treated: int
    n_control: int
    beta_hat: float | None = None

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "n": self.n,
            "n_treated": self.n_treated,
        }
        if self.beta_hat is not None:
            out["beta_hat"] = self.beta_hat
        return out


def _result(method, tau, se, exp, level, beta=None):
    z = norm.ppf(0.5 + level / 2)
    tau, se = float(tau), float(se)
    return EstimateResult(method=method, tau_hat=tau, se=se, ci=(tau - z * se, tau + z * se), level=level,
                          n=exp.n, n_treated=exp.n_treated, n_control=exp.n_control,
                          beta_hat=None if beta is None else float(beta))


def _arms(exp):
    t = exp.treatment == 1
    c = exp.treatment == 0
    if t.sum() < 2 or c.sum() < 2:
        raise DegenerateArm(f"need >= 2 units per arm (treated {int(t.sum())}, control {int(c.sum())})")
    return t, c


def _norm_weights(w, n) -> np.ndarray:
    w = np.asarray(getattr(w, "weights", w), dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weight vector has length {w.size}, experiment has {n} units")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and strictly positive")
    return w / w.mean()


def hc2_sandwich_se(design, w, resid, bread=None) -> np.ndarray:
    """Per-coefficient HC2 standard errors for a weighted regression.

    With ``A = (D'WD)^-1`` and leverage ``h_i = w_i d_i' A d_i`` (clamped at
    ``1 - 1e-10``) the covariance is ``A [sum w_i^2 r_i^2/(1-h_i) d_i d_i'] A``.
    """
    D = np.asarray(design, dtype=float)
    w = np.asarray(w, dtype=float)
    r = np.asarray(resid, dtype=float)
    if bread is None:
        fit = wls(D, np.zeros(len(w)), w)
        bread = fit.bread
    meat, _ = _kernels.hc2_meat(D, w, r, bread)
    cov = bread @ meat @ bread
    return np.sqrt(np.maximum(np.diag(cov), 0.0))


def difference_in_means(exp: ExperimentalSample, level: float = 0.95) -> EstimateResult:
    t, c = _arms(exp)
    y = exp.outcome
    y1, y0 = y[t], y[c]
    tau = y1.sum() / y1.size - y0.sum() / y0.size
    se = np.sqrt(y1.var(ddof=1) / y1.size + y0.var(ddof=1) / y0.size)
    return _result("DiM", tau, se, exp, level)


def _hajek(exp, w, y, level, method):
    t, c = _arms(exp)
    w = _norm_weights(w, exp.n)
    wy = w * y
    m1 = wy[t].sum() / w[t].sum()
    m0 = wy[c].sum() / w[c].sum()
    tau = m1 - m0
    D = np.column_stack([np.ones(exp.n), exp.treatment])
    fitted = np.where(t, m1, m0)
    fit = wls(D, y, w, "intercept/treatment design")
    se = hc2_sandwich_se(D, w, y - fitted, fit.bread)[1]
    return _result(method, tau, se, exp, level)


def hajek_weighted(exp: ExperimentalSample, w, outcome_override=None, level: float = 0.95,
                   method: str = "W") -> EstimateResult:
    """Hajek weighted difference in means; SE from HC2 on the weighted
    regression of the outcome on an intercept and treatment."""
    y = exp.outcome if outcome_override is None else np.asarray(outcome_override, dtype=float)
    return _hajek(exp, w, y, level, method)


def _adjust_matrix(exp, extra_covariates):
    if extra_covariates is None:
        return exp.adjust_covariates
    Z = np.asarray(extra_covariates, dtype=float)
    return Z.reshape(exp.n, -1) if Z.size else np.zeros((exp.n, 0))


def _regression(exp, w, y, Z, level, method, interact=False, coef_index=1, beta_index=None):
    t, _ = _arms(exp)
    w = _norm_weights(w, exp.n)
    cols = [np.ones(exp.n), exp.treatment]
    if Z.shape[1]:
        cols.append(Z)
        if interact:
            zc = Z - (w @ Z) / w.sum()
            cols.append(zc * exp.treatment[:, None])
    D = np.column_stack(cols)
    fit = wls(D, y, w, f"{method} regression design")
    se = hc2_sandwich_se(D, w, fit.resid, fit.bread)
    beta = fit.coef[beta_index] if beta_index is not None else None
    return _result(method, fit.coef[coef_index], se[coef_index], exp, level, beta)


def weighted_least_squares(exp: ExperimentalSample, w, extra_covariates=None, outcome_override=None,
                           level: float = 0.95, interact: bool = False, method: str = "wLS") -> EstimateResult:
    """Treatment coefficient of the w-weighted regression on {1, T, X-tilde}.

    ``extra_covariates`` defaults to the experiment's adjustment covariates;
    pass an empty array for none, in which case this is the Hajek estimator.
    """
    y = exp.outcome if outcome_override is None else np.asarray(outcome_override, dtype=float)
    Z = _adjust_matrix(exp, extra_covariates)
    if Z.shape[1] == 0:
        return _hajek(exp, w, y, level, method)
    return _regression(exp, w, y, Z, level, method, interact=interact)


def _yhat(exp, model, yhat):
    if yhat is not None:
        return np.asarray(yhat, dtype=float)
    if model is None:
        raise ValueError("need a fitted residualizer or precomputed predictions")
    return predict_experiment(model, exp)


def post_residualized_weighted(exp: ExperimentalSample, w, model: FittedResidualizer | None = None, *,
                               yhat=None, level: float = 0.95) -> EstimateResult:
    e = exp.outcome - _yhat(exp, model, yhat)
    return _hajek(exp, w, e, level, "W_res")


def post_residualized_wls(exp: ExperimentalSample, w, model: FittedResidualizer | None = None,
                          extra_covariates=None, *, yhat=None, level: float = 0.95,
                          interact: bool = False) -> EstimateResult:
    e = exp.outcome - _yhat(exp, model, yhat)
    return weighted_least_squares(exp, w, extra_covariates, outcome_override=e, level=level,
                                  interact=interact, method="wLS_res")


def covariate_adjusted_weighted(exp: ExperimentalSample, w, model: FittedResidualizer | None = None, *,
                                yhat=None, fixed_beta: float | None = None,
                                level: float = 0.95) -> EstimateResult:
    """Weighted regression of Y on {1, T, Y-hat}; ``beta_hat`` is the Y-hat
    coefficient.  ``fixed_beta`` constrains it instead (1 gives the
    post-residualized weighted estimator)."""
    yh = _yhat(exp, model, yhat)
    if fixed_beta is not None:
        res = _hajek(exp, w, exp.outcome - fixed_beta * yh, level, "W_cov")
        return _result("W_cov", res.tau_hat, res.se, exp, level, fixed_beta)
    if np.ptp(yh) == 0:
        raise RankDeficient("predicted outcome is constant; drop it as a covariate")
    return _regression(exp, w, exp.outcome, yh.reshape(-1, 1), level, "W_cov", beta_index=2)


def covariate_adjusted_wls(exp: ExperimentalSample, w, model: FittedResidualizer | None = None,
                           extra_covariates=None, *, yhat=None, fixed_beta: float | None = None,
                           level: float = 0.95, interact: bool = False) -> EstimateResult:
    """Weighted regression of Y on {1, T, Y-hat, X-tilde}."""
    yh = _yhat(exp, model, yhat)
    Z = _adjust_matrix(exp, extra_covariates)
    if fixed_beta is not None:
        res = weighted_least_squares(exp, w, Z, outcome_override=exp.outcome - fixed_beta * yh,
                                     level=level, interact=interact, method="wLS_cov")
        return _result("wLS_cov", res.tau_hat, res.se, exp, level, fixed_beta)
    if Z.shape[1] == 0:
        res = covariate_adjusted_weighted(exp, w, yhat=yh, level=level)
        return _result("wLS_cov", res.tau_hat, res.se, exp, level, res.beta_hat)
    if np.ptp(yh) == 0:
        raise RankDeficient("predicted outcome is constant; drop it as a covariate")
    return _regression(exp, w, exp.outcome, np.column_stack([yh, Z]), level, "wLS_cov",
                       interact=interact, beta_index=2)


def all_estimates(exp: ExperimentalSample, w, model: FittedResidualizer | None = None, *, yhat=None,
                  extra_covariates=None, level: float = 0.95, methods=METHODS) -> dict:
    """Run the requested estimators on one experiment; returns method -> result."""
    yh = _yhat(exp, model, yhat) if any(m in methods for m in ("W_res", "W_cov", "wLS_res", "wLS_cov")) else None
    Z = _adjust_matrix(exp, extra_covariates)
    run = {
        "DiM": lambda: difference_in_means(exp, level),
        "W": lambda: hajek_weighted(exp, w, level=level),
        "W_res": lambda: post_residualized_weighted(exp, w, yhat=yh, level=level),
        "W_cov": lambda: covariate_adjusted_weighted(exp, w, yhat=yh, level=level),
        "wLS": lambda: weighted_least_squares(exp, w, Z, level=level),
        "wLS_res": lambda: post_residualized_wls(exp, w, extra_covariates=Z, yhat=yh, level=level),
        "wLS_cov": lambda: covariate_adjusted_wls(exp, w, extra_covariates=Z, yhat=yh, level=level),
    }
    return {m: run[m]() for m in methods}
