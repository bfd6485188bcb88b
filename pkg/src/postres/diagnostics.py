"""Pseudo-R^2 go/no-go diagnostics computed on experimental controls only.

Nothing here reads a treated unit's outcome: each entry point first
restricts the experiment to its control arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import weighted_resid, wls_minnorm
from .data import ExperimentalSample
from .exceptions import InputError
from .residualizer import predict_experiment


@dataclass(frozen=True)
class DiagnosticResult:
    variant: str
    r2_0: float | None
    splits_used: int = 0
    split_values: tuple = ()
    undefined_reason: str | None = None
    minimal_norm: bool = False

    @property
    def defined(self) -> bool:
        return self.r2_0 is not None

    @property
    def recommend_residualize(self) -> bool | None:
        return None if self.r2_0 is None else bool(self.r2_0 > 0)

    def to_dict(self) -> dict:
        out = {
            "variant": self.variant,
            "r2_0": self.r2_0,
            "recommend": self.recommend_residualize,
            "splits_used": self.splits_used,
        }
        if self.undefined_reason:
            out["undefined_reason"] = self.undefined_reason
        return out


def _controls(exp: ExperimentalSample, w, yhat):
    c = exp.treatment == 0
    w = np.asarray(getattr(w, "weights", w), dtype=float)
    return (exp.outcome[c], np.asarray(yhat, dtype=float)[c], w[c], exp.adjust_covariates[c])


def _yhat(exp, model, yhat):
    return np.asarray(yhat, dtype=float) if yhat is not None else predict_experiment(model, exp)


def r2_from_residuals(num_resid, den_resid, w):
    """1 - sum w^2 (a - a_bar)^2 / sum w^2 (b - b_bar)^2 with Hajek
    (w-weighted) centring.  Returns None when the denominator is zero."""
    sw = w.sum()
    a = num_resid - (w @ num_resid) / sw
    b = den_resid - (w @ den_resid) / sw
    w2 = w * w
    den = w2 @ (b * b)
    if not den > 0:
        return None
    return float(1.0 - (w2 @ (a * a)) / den)


def _wls_r2(y, e, w, Z):
    eps, d1 = weighted_resid(Z, y, w)
    eps_res, d2 = weighted_resid(Z, e, w)
    return r2_from_residuals(eps_res, eps, w), (d1 or d2)


def pseudo_r2_weighted(exp: ExperimentalSample, w, model=None, *, yhat=None) -> DiagnosticResult:
    yh = _yhat(exp, model, yhat)
    y, yh0, w0, _ = _controls(exp, w, yh)
    if y.size < 2:
        return DiagnosticResult("W", None, undefined_reason="fewer than 2 control units")
    r2 = r2_from_residuals(y - yh0, y, w0)
    if r2 is None:
        return DiagnosticResult("W", None, undefined_reason="control outcomes are constant")
    return DiagnosticResult("W", r2)


def pseudo_r2_wls(exp: ExperimentalSample, w, model=None, extra_covariates=None, *,
                  yhat=None) -> DiagnosticResult:
    """Adjusted variant: both Y and the residual are first regressed on
    X-tilde across (w-weighted) controls."""
    yh = _yhat(exp, model, yhat)
    c = exp.treatment == 0
    Z = exp.adjust_covariates if extra_covariates is None else np.asarray(extra_covariates, dtype=float).reshape(exp.n, -1)
    if Z.shape[1] == 0:
        res = pseudo_r2_weighted(exp, w, yhat=yh)
        return DiagnosticResult("wLS", res.r2_0, undefined_reason=res.undefined_reason)
    y, yh0, w0, _ = _controls(exp, w, yh)
    if y.size < 2:
        return DiagnosticResult("wLS", None, undefined_reason="fewer than 2 control units")
    r2, deficient = _wls_r2(y, y - yh0, w0, Z[c])
    if r2 is None:
        return DiagnosticResult("wLS", None, undefined_reason="control outcomes fully explained by X-tilde",
                                minimal_norm=deficient)
    return DiagnosticResult("wLS", r2, minimal_norm=deficient)


def default_splits(n_control: int) -> int:
    return 50 if n_control < 500 else 1


def _scaling_beta(y, yh, w, literal):
    if literal:
        # literal reading: regress Y-hat on Y, use the slope on Y
        D = np.column_stack([np.ones(len(y)), y])
        coef, _, deficient = wls_minnorm(D, yh, w)
        if deficient or np.ptp(y) == 0:
            return None
        return coef[1]
    if np.ptp(yh) == 0:
        return None
    D = np.column_stack([np.ones(len(y)), yh])
    coef, _, deficient = wls_minnorm(D, y, w)
    return None if deficient else coef[1]


def split_streams(seed: int, splits: int):
    """One independent generator per split, keyed by (seed, split index)."""
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), s])))
            for s in range(splits)]


def pseudo_r2_covariate_crossfit(exp: ExperimentalSample, w, model=None, extra_covariates=None, *,
                                 yhat=None, splits: int | None = None, seed: int = 0,
                                 literal_direction: bool = False, fraction: float = 0.5) -> DiagnosticResult:
    """Cross-fitted pseudo-R^2 for the Y-hat-as-covariate estimators.

    Each repetition halves the controls at random, fits the scaling
    coefficient on one half and evaluates the out-of-sample residual
    Y - beta * Y-hat on the other, then swaps.  With ``extra_covariates``
    the evaluation step uses the X-tilde-adjusted form.  The result is the
    mean over all repetitions and both directions, summed in split order.
    """
    yh = _yhat(exp, model, yhat)
    adjusted = extra_covariates is not None and np.asarray(extra_covariates).size > 0
    variant = "wLS_cov" if adjusted else "W_cov"
    c = exp.treatment == 0
    y, yh0, w0, _ = _controls(exp, w, yh)
    Z0 = np.asarray(extra_covariates, dtype=float).reshape(exp.n, -1)[c] if adjusted else None
    n0 = y.size
    if n0 < 4:
        return DiagnosticResult(variant, None, undefined_reason="fewer than 4 control units")
    if np.ptp(yh0) == 0:
        return DiagnosticResult(variant, None,
                                undefined_reason="predicted outcome constant on controls; scaling coefficient undefined")
    if splits is None:
        splits = default_splits(n0)
    if splits < 1:
        raise InputError("splits must be >= 1")
    n1 = int(round(n0 * fraction))
    n1 = min(max(n1, 2), n0 - 2)
    values = []
    deficient_any = False
    for rng in split_streams(seed, splits):
        perm = rng.permutation(n0)
        halves = (perm[:n1], perm[n1:])
        for tr, te in (halves, halves[::-1]):
            beta = _scaling_beta(y[tr], yh0[tr], w0[tr], literal_direction)
            if beta is None:
                continue
            e_oos = y[te] - beta * yh0[te]
            if adjusted:
                r2, deficient = _wls_r2(y[te], e_oos, w0[te], Z0[te])
                deficient_any |= deficient
            else:
                r2 = r2_from_residuals(e_oos, y[te], w0[te])
            if r2 is not None:
                values.append(r2)
    if not values:
        return DiagnosticResult(variant, None, splits_used=splits,
                                undefined_reason="no split produced a defined diagnostic")
    total = 0.0
    for v in values:
        total += v
    return DiagnosticResult(variant, total / len(values), splits_used=splits, split_values=tuple(values),
                            minimal_norm=deficient_any)


@dataclass(frozen=True)
class ProxyDecomposition:
    measure_gap_var: float
    prediction_err_var: float

    def to_dict(self):
        return {"measure_gap_var": self.measure_gap_var, "prediction_err_var": self.prediction_err_var}


def proxy_error_decomposition(exp: ExperimentalSample, model=None, *, proxy=None, yhat=None) -> ProxyDecomposition:
    """Sample variances over controls of (Y - proxy) and (proxy - Y-hat)."""
    proxy = exp.proxy if proxy is None else np.asarray(proxy, dtype=float)
    if proxy is None:
        raise InputError("proxy outcome not measured on the experiment")
    yh = _yhat(exp, model, yhat)
    c = exp.treatment == 0
    y, px, yh0 = exp.outcome[c], proxy[c], yh[c]
    return ProxyDecomposition(float(np.var(y - px, ddof=1)), float(np.var(px - yh0, ddof=1)))


def all_diagnostics(exp, w, model=None, *, yhat=None, extra_covariates=None, splits=None, seed=0,
                    literal_direction=False) -> dict:
    yh = _yhat(exp, model, yhat)
    Z = exp.adjust_covariates if extra_covariates is None else extra_covariates
    return {
        "W": pseudo_r2_weighted(exp, w, yhat=yh),
        "wLS": pseudo_r2_wls(exp, w, extra_covariates=Z, yhat=yh),
        "W_cov": pseudo_r2_covariate_crossfit(exp, w, yhat=yh, splits=splits, seed=seed,
                                              literal_direction=literal_direction),
        "wLS_cov": pseudo_r2_covariate_crossfit(exp, w, extra_covariates=Z, yhat=yh, splits=splits, seed=seed,
                                                literal_direction=literal_direction),
    }
