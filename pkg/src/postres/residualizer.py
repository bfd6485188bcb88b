"""Residualizing models fit on population outcomes.

Every learner works on the same basis: the population covariates plus all
pairwise products.  The fitted object is immutable and predicts by column
name, so experimental data with reordered or missing columns is caught.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import nnls

from . import _kernels
from .data import PopulationSample
from .exceptions import ColumnMismatch, EmptyFitSubset

LEARNERS = ("ols-interactions", "ridge", "lasso", "stacked-ensemble", "constant-mean", "zero")
ALIASES = {
    "ols-int": "ols-interactions",
    "ols": "ols-interactions",
    "stack": "stacked-ensemble",
    "mean": "constant-mean",
}
STACK_MEMBERS = ("ols-interactions", "ridge", "lasso", "constant-mean")


@dataclass(frozen=True)
class ResidualizerSpec:
    learner: str = "ols-interactions"
    folds: int = 5
    n_penalties: int = 50
    penalty_ratio: float = 1e-4
    penalty_grid: tuple | None = None
    fit_subset: str = "all-population"
    interactions: bool = True
    compute_cv: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "learner", ALIASES.get(self.learner, self.learner))
        if self.learner not in LEARNERS:
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.folds < 2:
            raise ValueError("need at least 2 CV folds")
        if self.penalty_grid is not None and any(p < 0 for p in self.penalty_grid):
            raise ValueError("penalties must be non-negative")
        if self.fit_subset not in ("all-population", "population-controls"):
            raise ValueError(f"unknown fit_subset {self.fit_subset!r}")


@dataclass(frozen=True, eq=False)
class FittedResidualizer:
    learner: str
    columns: tuple
    intercept: float = 0.0
    coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    interactions: bool = True
    cv_mse: float = float("nan")
    n_train: int = 0
    selected_penalty: float | None = None
    stack_weights: tuple | None = None
    members: tuple = ()
    rank_deficient: bool = False
    degenerate: bool = False

    def predict(self, X, columns=None) -> np.ndarray:
        return predict(self, X, columns)

    def summary(self) -> dict:
        out = {"learner": self.learner, "cv_mse": _jsonable(self.cv_mse), "n_train": self.n_train}
        if self.selected_penalty is not None:
            out["selected_penalty"] = self.selected_penalty
        if self.stack_weights is not None:
            out["stack_weights"] = dict(zip((m.learner for m in self.members), self.stack_weights))
        if self.rank_deficient:
            out["rank_deficient"] = True
        if self.degenerate:
            out["degenerate_outcome"] = True
        return out


def _jsonable(x):
    return None if x is None or not np.isfinite(x) else float(x)


def expand(X, interactions=True) -> np.ndarray:
    """Main effects followed by all pairwise products X_j * X_k, j < k."""
    X = np.asarray(X, dtype=float)
    if not interactions or X.shape[1] < 2:
        return X
    prods = [X[:, j] * X[:, k] for j, k in combinations(range(X.shape[1]), 2)]
    return np.column_stack([X] + prods)


def fold_ids(n, k, seed) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=np.int64)
    ids[perm] = np.arange(n) % k
    return ids


# ------------------------------------------------------------------ learners


def _fit_ols(F, y):
    D = np.column_stack([np.ones(len(y)), F])
    coef, _, rank, _ = np.linalg.lstsq(D, y, rcond=1e-10)
    return coef[0], coef[1:], rank < D.shape[1]


def _standardize(F):
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (F - mu) / sd, mu, sd


def penalty_grid(F, y, n=50, ratio=1e-4) -> np.ndarray:
    """Log-spaced grid from the smallest lasso penalty zeroing every
    coefficient down by ``ratio``."""
    Fs, _, _ = _standardize(F)
    lam_max = np.max(np.abs(Fs.T @ (y - y.mean()))) / len(y) if Fs.shape[1] else 0.0
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * ratio, n)


def _ridge_path(F, y, lams):
    """Ridge coefficients (original scale) for each penalty:
    minimise ||y - b0 - F b||^2 / (2n) + lam ||b_std||^2 / 2."""
    Fs, mu, sd = _standardize(F)
    ym = y.mean()
    n = len(y)
    U, s, Vt = np.linalg.svd(Fs, full_matrices=False)
    Uty = U.T @ (y - ym)
    out = []
    for lam in lams:
        d = s / (s * s + n * lam)
        b = Vt.T @ (d * Uty) / sd
        out.append((ym - mu @ b, b))
    return out


def _lasso_path(F, y, lams, tol=1e-7, max_sweeps=10_000):
    Fs, mu, sd = _standardize(F)
    ym = y.mean()
    yc = y - ym
    col_sq = (Fs * Fs).mean(axis=0)
    beta = np.zeros(Fs.shape[1])
    out = []
    for lam in lams:
        beta, _ = _kernels.lasso_cd(Fs, yc, lam, beta, col_sq, tol, max_sweeps)
        beta = np.array(beta)
        b = beta / sd
        out.append((ym - mu @ b, b))
    return out


_PATHS = {"ridge": _ridge_path, "lasso": _lasso_path}


def _cv_path(F, y, lams, learner, ids, k):
    path = _PATHS[learner]
    err = np.zeros(len(lams))
    for f in range(k):
        tr, te = ids != f, ids == f
        for j, (b0, b) in enumerate(path(F[tr], y[tr], lams)):
            err[j] += np.sum((y[te] - b0 - F[te] @ b) ** 2)
    return err / len(y)


def _fit_learner(learner, F, y, spec, ids, cv=True):
    """Return (intercept, coef, extras) for a linear learner on features F."""
    k = spec.folds
    if learner == "zero":
        res = dict(intercept=0.0, coef=np.zeros(F.shape[1]))
        if cv:
            res["cv_mse"] = float(np.mean(y * y))
        return res
    if learner == "constant-mean":
        res = dict(intercept=float(y.mean()), coef=np.zeros(F.shape[1]))
        if cv:
            pred = np.empty_like(y)
            for f in range(k):
                pred[ids == f] = y[ids != f].mean()
            res["cv_mse"] = float(np.mean((y - pred) ** 2))
        return res
    if learner == "ols-interactions":
        b0, b, deficient = _fit_ols(F, y)
        res = dict(intercept=float(b0), coef=b, rank_deficient=bool(deficient))
        if cv:
            pred = np.empty_like(y)
            for f in range(k):
                tr, te = ids != f, ids == f
                c0, c, _ = _fit_ols(F[tr], y[tr])
                pred[te] = c0 + F[te] @ c
            res["cv_mse"] = float(np.mean((y - pred) ** 2))
        return res
    if learner in _PATHS:
        lams = np.asarray(spec.penalty_grid, dtype=float) if spec.penalty_grid is not None else \
            penalty_grid(F, y, spec.n_penalties, spec.penalty_ratio)
        err = _cv_path(F, y, lams, learner, ids, k)
        j = int(np.argmin(err))
        # refit along the path up to the chosen penalty (warm starts for lasso)
        b0, b = _PATHS[learner](F, y, lams[: j + 1])[-1]
        return dict(intercept=float(b0), coef=b, selected_penalty=float(lams[j]), cv_mse=float(err[j]))
    raise ValueError(learner)


def fit_residualizer(spec: ResidualizerSpec, pop: PopulationSample) -> FittedResidualizer:
    """Fit the residualizing model on population data only."""
    X, y = pop.covariates, pop.outcome
    if spec.fit_subset == "population-controls":
        if pop.treatment is None:
            raise EmptyFitSubset("population-controls requested but population has no treatment column")
        keep = pop.treatment == 0
        if not keep.any():
            raise EmptyFitSubset("population-controls requested but population has no control units")
        X, y = X[keep], y[keep]
    F = expand(X, spec.interactions)
    ids = fold_ids(len(y), spec.folds, spec.seed)
    learner = spec.learner
    degenerate = bool(np.ptp(y) == 0) if len(y) else True
    if degenerate and learner not in ("zero", "constant-mean"):
        learner = "constant-mean"
    common = dict(columns=pop.covariate_names, interactions=spec.interactions, n_train=len(y),
                  degenerate=degenerate)

    if learner == "stacked-ensemble":
        return _fit_stack(F, y, spec, ids, common)
    res = _fit_learner(learner, F, y, spec, ids, cv=spec.compute_cv or learner in _PATHS)
    if not spec.compute_cv and learner not in _PATHS:
        res.pop("cv_mse", None)
    return FittedResidualizer(learner=learner, **common, **res)


def _fit_stack(F, y, spec, ids, common):
    k = spec.folds
    members = STACK_MEMBERS
    oof = np.zeros((len(y), len(members)))
    for f in range(k):
        tr, te = ids != f, ids == f
        inner = fold_ids(int(tr.sum()), k, spec.seed + f + 1)
        for m, name in enumerate(members):
            r = _fit_learner(name, F[tr], y[tr], spec, inner, cv=name in _PATHS)
            oof[te, m] = r["intercept"] + F[te] @ r["coef"]
    a = _nnls_weights(oof, y)
    # cross-validated risk of the stack: combination weights fit off-fold too
    pred = np.empty_like(y)
    for f in range(k):
        tr, te = ids != f, ids == f
        pred[te] = oof[te] @ _nnls_weights(oof[tr], y[tr])
    cv_mse = float(np.mean((y - pred) ** 2))
    fitted = []
    for name in members:
        r = _fit_learner(name, F, y, spec, ids, cv=name in _PATHS)
        fitted.append(FittedResidualizer(learner=name, intercept=r["intercept"], coef=r["coef"],
                                         cv_mse=r.get("cv_mse", float("nan")),
                                         selected_penalty=r.get("selected_penalty"), **common))
    intercept = float(sum(ai * m.intercept for ai, m in zip(a, fitted)))
    coef = sum(ai * m.coef for ai, m in zip(a, fitted))
    return FittedResidualizer(learner="stacked-ensemble", intercept=intercept, coef=np.asarray(coef),
                              cv_mse=cv_mse, stack_weights=tuple(float(x) for x in a),
                              members=tuple(fitted), **common)


def _nnls_weights(Z, y):
    a, _ = nnls(Z, y)
    s = a.sum()
    return a / s if s > 0 else np.full(Z.shape[1], 1.0 / Z.shape[1])


# ------------------------------------------------------------------ predict


def _align(model: FittedResidualizer, X, columns):
    if hasattr(X, "columns") and columns is None:
        columns = list(X.columns)
        X = X.to_numpy(dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if len(model.columns) == 1 else X.reshape(1, -1)
    if columns is None:
        raise ColumnMismatch("column names are required to align covariates with the residualizer")
    columns = tuple(columns)
    if len(columns) != X.shape[1]:
        raise ColumnMismatch("column names do not match covariate matrix width")
    if set(columns) != set(model.columns) or len(set(columns)) != len(columns):
        missing = sorted(set(model.columns) - set(columns))
        extra = sorted(set(columns) - set(model.columns))
        raise ColumnMismatch(f"covariate columns differ from training columns (missing {missing}, extra {extra})")
    if columns != model.columns:
        X = X[:, [columns.index(c) for c in model.columns]]
    return X


def predict(model: FittedResidualizer, X, columns=None) -> np.ndarray:
    """Deterministic predictions; columns are matched to training by name."""
    X = _align(model, X, columns)
    if model.learner == "zero":
        return np.zeros(len(X))
    if model.learner == "constant-mean":
        return np.full(len(X), model.intercept)
    return model.intercept + expand(X, model.interactions) @ model.coef


def predict_experiment(model: FittedResidualizer, exp) -> np.ndarray:
    """Predicted outcomes for experimental units, columns pulled by name."""
    try:
        X = exp.columns(model.columns)
    except KeyError as e:
        raise ColumnMismatch(f"experiment lacks residualizer column {e.args[0]!r}") from None
    return predict(model, X, model.columns)


def residuals(model: FittedResidualizer, exp) -> np.ndarray:
    return exp.outcome - predict_experiment(model, exp)


def zero_model(columns) -> FittedResidualizer:
    return FittedResidualizer(learner="zero", columns=tuple(columns))


def constant_model(columns, value: float) -> FittedResidualizer:
    return FittedResidualizer(learner="constant-mean", columns=tuple(columns), intercept=float(value))
