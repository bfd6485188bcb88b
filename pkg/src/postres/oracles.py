"""Plug-in weighted moments and asymptotic-variance formulas.

``var_w`` / ``cov_w`` use weights rescaled to mean one over the values
passed in and Hajek-weighted means, i.e. ``sum w^2 (a - a_w)(b - b_w) / n``.
Per-arm quantities are computed on that arm's units with that arm's weights.
"""

import numpy as np

from ._linalg import wls_minnorm


def _w(w, n):
    w = np.asarray(getattr(w, "weights", w), dtype=float)
    if w.shape != (n,):
        raise ValueError("weights and values differ in length")
    return w / w.mean()


def weighted_covariance(a, b, w) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2:
        raise ValueError("need at least two values")
    w = _w(w, a.size)
    sw = w.sum()
    da = a - (w @ a) / sw
    db = b - (w @ b) / sw
    return float(((w * w) * da) @ db / a.size)


def weighted_variance(a, w) -> float:
    return weighted_covariance(a, a, w)


def asy_var_hajek(y1, w1, y0, w0, p: float) -> float:
    """Scaled asymptotic variance (1/p) var_w(Y(1)) + (1/(1-p)) var_w(Y(0))."""
    return weighted_variance(y1, w1) / p + weighted_variance(y0, w0) / (1 - p)


def efficiency_gain_weighted(y1, yhat1, w1, y0, yhat0, w0, p: float) -> float:
    """Asymptotic-variance reduction from residualizing the Hajek estimator:
    -var_w(Yhat)/(p(1-p)) + (2/p) cov_w(Y(1), Yhat) + (2/(1-p)) cov_w(Y(0), Yhat),
    with the var_w(Yhat) term split across arms as var1/p + var0/(1-p)."""
    v1 = weighted_variance(yhat1, w1)
    v0 = weighted_variance(yhat0, w0)
    c1 = weighted_covariance(y1, yhat1, w1)
    c0 = weighted_covariance(y0, yhat0, w0)
    return -(v1 / p + v0 / (1 - p)) + 2 * c1 / p + 2 * c0 / (1 - p)


def relative_reduction(r2_0: float, r2_1: float, f: float) -> float:
    """R2_0 - xi / (1 + f) with xi = R2_0 - R2_1."""
    return r2_0 - (r2_0 - r2_1) / (1 + f)


def xi_f_from_moments(var_y1: float, var_y0: float, var_e1: float, var_e0: float, p: float) -> dict:
    r2_0 = 1 - var_e0 / var_y0
    r2_1 = 1 - var_e1 / var_y1
    f = p * var_y0 / ((1 - p) * var_y1)
    return {"r2_0": r2_0, "r2_1": r2_1, "xi": r2_0 - r2_1, "f": f}


def arm_moments(y1, yhat1, w1, y0, yhat0, w0, p: float) -> dict:
    y1, yhat1, y0, yhat0 = (np.asarray(a, dtype=float) for a in (y1, yhat1, y0, yhat0))
    m = xi_f_from_moments(weighted_variance(y1, w1), weighted_variance(y0, w0),
                          weighted_variance(y1 - yhat1, w1), weighted_variance(y0 - yhat0, w0), p)
    m["relative_reduction"] = relative_reduction(m["r2_0"], m["r2_1"], m["f"])
    return m


def _common_slopes(y, T, Z, w):
    D = np.column_stack([np.ones(len(y)), T, Z])
    coef, _, _ = wls_minnorm(D, y, w)
    return coef[2:]


def efficiency_gain_wls(y, yhat, T, Z, w, p: float) -> dict:
    """Asymptotic-variance reduction from residualizing the wLS estimator.

    The projection coefficients come from the w-weighted regressions of Y and
    of e = Y - Yhat on {1, T, Z}.  Returns ``term_a`` (explanatory power of
    the residualizing model over the linear adjustment), ``term_b`` (the
    adjustment remaining after residualizing) and their sum ``gain_total``.
    """
    y, yhat, T = (np.asarray(a, dtype=float) for a in (y, yhat, T))
    w = np.asarray(getattr(w, "weights", w), dtype=float)
    Z = np.asarray(Z, dtype=float).reshape(len(y), -1) if np.size(Z) else np.zeros((len(y), 0))
    e = y - yhat
    if Z.shape[1]:
        lin = Z @ _common_slopes(y, T, Z, w)
        lin_res = Z @ _common_slopes(e, T, Z, w)
    else:
        lin = np.zeros_like(y)
        lin_res = np.zeros_like(y)
    t, c = T == 1, T == 0
    vw = weighted_variance
    cw = weighted_covariance
    term_a = (vw(y[t] - lin[t], w[t]) - vw(e[t], w[t])) / p + (vw(y[c] - lin[c], w[c]) - vw(e[c], w[c])) / (1 - p)
    if Z.shape[1]:
        term_b = (2 * cw(e[t], lin_res[t], w[t]) / p + 2 * cw(e[c], lin_res[c], w[c]) / (1 - p)
                  - (vw(lin_res[t], w[t]) / p + vw(lin_res[c], w[c]) / (1 - p)))
    else:
        term_b = 0.0
    return {"gain_total": term_a + term_b, "term_a": term_a, "term_b": term_b}


def oracle_report(exp, w, yhat) -> dict:
    """Plug-in oracle components for one experiment."""
    w = np.asarray(getattr(w, "weights", w), dtype=float)
    T = exp.treatment
    t, c = T == 1, T == 0
    p = t.mean()
    y = exp.outcome
    yhat = np.asarray(yhat, dtype=float)
    m = arm_moments(y[t], yhat[t], w[t], y[c], yhat[c], w[c], p)
    gain = efficiency_gain_weighted(y[t], yhat[t], w[t], y[c], yhat[c], w[c], p)
    wls_parts = efficiency_gain_wls(y, yhat, T, exp.adjust_covariates, w, p)
    return {
        "gain_total": gain,
        "term_a": wls_parts["term_a"],
        "term_b": wls_parts["term_b"],
        "gain_wls_total": wls_parts["gain_total"],
        "r2_0": m["r2_0"],
        "xi": m["xi"],
        "f": m["f"],
        "relative_reduction": m["relative_reduction"],
    }
