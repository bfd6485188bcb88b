"""Sampling weights for the experimental units.

Two routes to weights proportional to the inverse relative density of the
experimental sample: a logistic selection model fit by IRLS on the stacked
experiment + population data, and entropy balancing on first moments.
Weights are always returned normalised to mean one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, logsumexp

from .exceptions import Infeasible, RankDeficient, Separation

SEP_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray
    method: str
    normalization: str = "mean-one"
    moment_gaps: tuple = ()
    iterations: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be a finite, strictly positive vector")
        w = w / w.mean()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def ess(self) -> float:
        w = self.weights
        return float(w.sum() ** 2 / (w * w).sum())

    @property
    def max_weight(self) -> float:
        return float(self.weights.max())

    def summary(self) -> dict:
        return {
            "method": self.method,
            "ess": self.ess,
            "max_weight": self.max_weight,
            "moment_gaps": [float(g) for g in self.moment_gaps],
        }


@dataclass(frozen=True, eq=False)
class SelectionModel:
    """Logistic model for Pr(in experiment | X) on the original covariate scale."""

    coefficients: np.ndarray
    converged: bool
    iterations: int
    names: tuple = field(default=())

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        return self.coefficients[0] + X @ self.coefficients[1:]

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.linear_predictor(X))


def _standardize(Z):
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0)
    if np.any(sd <= 0):
        raise RankDeficient("constant covariate column")
    return (Z - mu) / sd, mu, sd


def _loglik(eta, s):
    # sum of s*eta - log(1 + e^eta), stable
    return float(np.sum(s * eta - np.logaddexp(0.0, eta)))


def fit_logistic_selection(exp_X, pop_X, *, max_iter: int = 100, score_tol: float = 1e-8,
                           rel_tol: float = 1e-10, names=()) -> SelectionModel:
    """Maximum-likelihood logit of S (1 = experimental) by IRLS.

    Covariates are standardised on the stacked data before solving; the
    returned coefficients (intercept first) are on the original scale.
    Raises ``Separation`` if a fitted probability leaves
    ``[1e-12, 1 - 1e-12]`` and ``RankDeficient`` for collinear designs.
    """
    exp_X = np.asarray(exp_X, dtype=float).reshape(len(exp_X), -1)
    pop_X = np.asarray(pop_X, dtype=float).reshape(len(pop_X), -1)
    Z = np.vstack([exp_X, pop_X])
    s = np.concatenate([np.ones(len(exp_X)), np.zeros(len(pop_X))])
    Zs, mu, sd = _standardize(Z)
    D = np.column_stack([np.ones(len(Z)), Zs])
    _, R = np.linalg.qr(D)
    sv = np.linalg.svd(R, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficient("stacked selection design is collinear")

    beta = np.zeros(D.shape[1])
    eta = D @ beta
    ll = _loglik(eta, s)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        if np.any(p < SEP_EPS) or np.any(p > 1 - SEP_EPS):
            raise Separation("fitted selection probability hit 0 or 1 (perfect separation)")
        score = D.T @ (s - p)
        if np.max(np.abs(score)) < score_tol:
            converged = True
            break
        W = p * (1 - p)
        H = D.T @ (D * W[:, None])
        step = linalg.solve(H, score, assume_a="pos")
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = D @ cand
            ll_c = _loglik(eta_c, s)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-8:
                break
            t *= 0.5
        beta, eta = cand, eta_c
        rel = abs(ll_c - ll) / max(abs(ll), 1e-300)
        ll = ll_c
        if rel < rel_tol:
            p = expit(eta)
            if np.any(p < SEP_EPS) or np.any(p > 1 - SEP_EPS):
                raise Separation("fitted selection probability hit 0 or 1 (perfect separation)")
            converged = True
            break

    slopes = beta[1:] / sd
    intercept = beta[0] - slopes @ mu
    coef = np.concatenate([[intercept], slopes])
    if converged and not np.all(np.isfinite(coef)):
        converged = False
    return SelectionModel(coefficients=coef, converged=converged, iterations=it, names=tuple(names))


def weights_from_probabilities(p, method: str = "logistic") -> WeightVector:
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        odds = (1 - p) / p
    if not np.all(np.isfinite(odds)) or np.any(odds <= 0):
        raise Separation("non-finite or zero selection odds")
    return WeightVector(odds, method=method)


def weights_from_selection(model: SelectionModel, exp_X, cap: float | None = None) -> WeightVector:
    """w_i = (1 - p_i) / p_i, rescaled to mean one.

    ``cap`` (exploratory only) truncates weights at ``cap`` times the mean
    before the final rescale.
    """
    if not model.converged:
        raise Separation("selection model did not converge")
    eta = model.linear_predictor(exp_X)
    with np.errstate(over="ignore"):
        odds = np.exp(-eta)
    if not np.all(np.isfinite(odds)) or np.any(odds <= 0):
        raise Separation("non-finite or zero selection odds")
    if cap is not None:
        odds = _cap(odds, cap)
    return WeightVector(odds, method="logistic", iterations=model.iterations)


def _cap(w, cap):
    w = w / w.mean()
    return np.minimum(w, cap)


def entropy_balance(exp_X, target, *, tol: float = 1e-10, max_iter: int = 200,
                    cap: float | None = None) -> WeightVector:
    """Entropy-balancing weights whose weighted means equal ``target``.

    Solves the d-dimensional dual ``min_l log mean_i exp(l'z_i)`` with
    ``z_i = (x_i - target) / sd`` by damped Newton steps.  The gradient of the
    dual is the weighted moment gap in standardised units, so convergence at
    ``tol`` bounds every gap directly.
    """
    X = np.asarray(exp_X, dtype=float)
    X = X.reshape(len(X), -1)
    target = np.asarray(target, dtype=float).reshape(-1)
    n, d = X.shape
    if target.shape != (d,):
        raise ValueError(f"target has {target.size} entries, covariates have {d} columns")
    if d == 0:
        return WeightVector(np.ones(n), method="entropy-balance")
    sd = X.std(axis=0)
    if np.any(sd <= 0):
        raise RankDeficient("constant covariate column in balancing constraints")
    Z = (X - target) / sd
    if np.any(Z.min(axis=0) >= 0) or np.any(Z.max(axis=0) <= 0):
        raise Infeasible("target moments lie outside the range of the experimental covariates")
    sv = np.linalg.svd(Z - Z.mean(axis=0), compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankDeficient("balancing constraints are collinear")

    lam = np.zeros(d)

    def dual(l):
        return logsumexp(Z @ l) - np.log(n)

    f = dual(lam)
    it = 0
    g = None
    for it in range(max_iter + 1):
        eta = Z @ lam
        p = np.exp(eta - logsumexp(eta))
        g = p @ Z
        if np.max(np.abs(g)) < tol:
            break
        if it == max_iter:
            raise Infeasible("entropy balancing did not converge; target likely outside the convex hull")
        Zc = Z - g
        H = (Zc * p[:, None]).T @ Zc
        try:
            step = -linalg.solve(H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise Infeasible("dual Hessian became singular; target on or outside the convex hull")
        t = 1.0
        slope = g @ step
        if -slope < 1e-14 * max(1.0, abs(f)):
            # decrease is below the dual's rounding level, so Armijo cannot
            # discriminate; take the full Newton step
            lam = lam + step
            f = dual(lam)
            continue
        while True:
            cand = lam + t * step
            fc = dual(cand)
            if fc <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                if np.max(np.abs(g)) < 1e3 * tol:
                    break
                raise Infeasible("line search failed; target likely outside the convex hull")
        if t < 1e-12:
            break
        lam, f = cand, fc
        if not np.isfinite(f) or np.max(np.abs(lam)) > 1e8:
            raise Infeasible("dual diverged; target outside the convex hull")
    w = p * n
    if cap is not None:
        w = _cap(w, cap)
    wv = WeightVector(w, method="entropy-balance", iterations=it)
    gaps = (wv.weights @ X / wv.weights.sum() - target) / sd
    return WeightVector(wv.weights, method="entropy-balance", iterations=it,
                        moment_gaps=tuple(float(x) for x in gaps))


def moment_gaps(w, exp_X, target) -> np.ndarray:
    """Weighted-mean minus target, in units of the experimental column sd."""
    X = np.asarray(exp_X, dtype=float).reshape(len(exp_X), -1)
    w = np.asarray(w, dtype=float)
    return (w @ X / w.sum() - np.asarray(target, dtype=float)) / X.std(axis=0)


def estimate_weights(exp, pop, method: str = "entropy-balance", cap: float | None = None) -> WeightVector:
    """Sampling weights for a validated experiment/population pair."""
    names = exp.covariate_names
    exp_X = exp.covariates
    pop_X = pop.columns(names)
    if method == "logistic":
        model = fit_logistic_selection(exp_X, pop_X, names=names)
        wv = weights_from_selection(model, exp_X, cap=cap)
    elif method in ("entropy-balance", "ebal"):
        wv = entropy_balance(exp_X, pop_X.mean(axis=0), cap=cap)
    else:
        raise ValueError(f"unknown weight method {method!r}")
    gaps = moment_gaps(wv.weights, exp_X, pop_X.mean(axis=0)) if exp_X.shape[1] else np.zeros(0)
    return WeightVector(wv.weights, method=wv.method, iterations=wv.iterations,
                        moment_gaps=tuple(float(g) for g in gaps))
