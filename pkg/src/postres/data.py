"""Experimental / population containers, validation and CSV ingestion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .exceptions import ValidationError

ROLES = ("outcome", "treatment", "covariate", "adjust-covariate", "proxy", "site", "ignore")


def _frozen(a, rows: int | None = None) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    if rows is not None:
        a = a.reshape(rows, -1) if a.size else np.zeros((rows, 0))
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ExperimentalSample:
    """Randomized experiment: weighting covariates X, adjustment covariates
    X-tilde, binary treatment and outcome for ``n`` units.

    ``adjust_covariates`` defaults to ``covariates`` when omitted.  ``proxy``
    optionally carries a measured proxy outcome for the error decomposition.
    """

    covariates: np.ndarray
    covariate_names: tuple
    treatment: np.ndarray
    outcome: np.ndarray
    adjust_covariates: np.ndarray | None = None
    adjust_names: tuple | None = None
    proxy: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.outcome)
        X = np.asarray(self.covariates, dtype=float)
        if X.size and X.shape[0] != n:
            raise ValueError(f"covariates have {X.shape[0]} rows, outcome has {n}")
        object.__setattr__(self, "covariates", _frozen(X, n))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise ValueError("covariate_names length does not match covariate columns")
        object.__setattr__(self, "treatment", _frozen(self.treatment))
        object.__setattr__(self, "outcome", _frozen(self.outcome))
        if self.treatment.shape != (n,):
            raise ValueError("treatment length does not match outcome")
        if self.adjust_covariates is None:
            object.__setattr__(self, "adjust_covariates", self.covariates)
            object.__setattr__(self, "adjust_names", self.covariate_names)
        else:
            Z = _frozen(self.adjust_covariates, n)
            object.__setattr__(self, "adjust_covariates", Z)
            names = tuple(self.adjust_names or ())
            if len(names) != Z.shape[1]:
                raise ValueError("adjust_names length does not match adjust_covariates")
            object.__setattr__(self, "adjust_names", names)
        if self.proxy is not None:
            object.__setattr__(self, "proxy", _frozen(self.proxy))

    @property
    def n(self) -> int:
        return len(self.outcome)

    @property
    def n_treated(self) -> int:
        return int(np.sum(self.treatment == 1))

    @property
    def n_control(self) -> int:
        return int(np.sum(self.treatment == 0))

    def columns(self, names: Sequence[str]) -> np.ndarray:
        """Pull named columns from X, falling back to X-tilde."""
        cols = []
        for name in names:
            if name in self.covariate_names:
                cols.append(self.covariates[:, self.covariate_names.index(name)])
            elif name in self.adjust_names:
                cols.append(self.adjust_covariates[:, self.adjust_names.index(name)])
            else:
                raise KeyError(name)
        if not cols:
            return np.zeros((self.n, 0))
        return np.column_stack(cols)

    def subset(self, idx) -> "ExperimentalSample":
        idx = np.asarray(idx)
        return ExperimentalSample(
            covariates=self.covariates[idx],
            covariate_names=self.covariate_names,
            treatment=self.treatment[idx],
            outcome=self.outcome[idx],
            adjust_covariates=self.adjust_covariates[idx],
            adjust_names=self.adjust_names,
            proxy=None if self.proxy is None else self.proxy[idx],
        )

    def with_outcome(self, outcome) -> "ExperimentalSample":
        return ExperimentalSample(
            covariates=self.covariates,
            covariate_names=self.covariate_names,
            treatment=self.treatment,
            outcome=outcome,
            adjust_covariates=self.adjust_covariates,
            adjust_names=self.adjust_names,
            proxy=self.proxy,
        )


@dataclass(frozen=True, eq=False)
class PopulationSample:
    """Observational target-population sample with (proxy) outcomes."""

    covariates: np.ndarray
    covariate_names: tuple
    outcome: np.ndarray
    outcome_kind: str = "same-measure"
    treatment: np.ndarray | None = None

    def __post_init__(self):
        N = len(self.outcome)
        X = _frozen(self.covariates, N)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if len(self.covariate_names) != X.shape[1]:
            raise ValueError("covariate_names length does not match covariate columns")
        object.__setattr__(self, "outcome", _frozen(self.outcome))
        if self.outcome_kind not in ("same-measure", "proxy"):
            raise ValueError(f"outcome_kind must be 'same-measure' or 'proxy', got {self.outcome_kind!r}")
        if self.treatment is not None:
            t = _frozen(self.treatment)
            if t.shape != (N,):
                raise ValueError("population treatment length does not match outcome")
            object.__setattr__(self, "treatment", t)

    @property
    def N(self) -> int:
        return len(self.outcome)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        missing = [c for c in names if c not in self.covariate_names]
        if missing:
            raise KeyError(missing[0])
        idx = [self.covariate_names.index(c) for c in names]
        return self.covariates[:, idx] if idx else np.zeros((self.N, 0))


@dataclass(frozen=True)
class AnalysisSpec:
    weight_method: str = "entropy-balance"
    learner: str = "ols-interactions"
    estimators: tuple = ("DiM", "W", "W_res", "W_cov", "wLS", "wLS_res", "wLS_cov")
    splits: int | None = None
    split_fraction: float = 0.5
    seed: int = 0
    level: float = 0.95

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ValueError("confidence level must lie in (0, 1)")
        if self.splits is not None and self.splits < 1:
            raise ValueError("splits must be >= 1")
        if self.weight_method not in ("logistic", "entropy-balance"):
            raise ValueError(f"unknown weight method {self.weight_method!r}")


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self):
        if self.violations:
            raise ValidationError(self.violations)


def validate_pair(exp: ExperimentalSample, pop: PopulationSample) -> ValidationReport:
    """Collect every violated data precondition; never raises."""
    v = []
    t = exp.treatment
    if np.any(np.isnan(t)) or not np.all(np.isin(t, (0.0, 1.0))):
        v.append("treatment must be binary 0/1")
    n1, n0 = exp.n_treated, exp.n_control
    if n1 == 0:
        v.append("no treated units")
    elif n1 < 2:
        v.append(f"fewer than 2 treated units ({n1})")
    if n0 == 0:
        v.append("no control units")
    elif n0 < 2:
        v.append(f"fewer than 2 control units ({n0})")
    if exp.n < 4:
        v.append(f"experimental sample too small (n={exp.n} < 4)")
    for name, arr in (("covariates", exp.covariates), ("adjust_covariates", exp.adjust_covariates),
                      ("outcome", exp.outcome)):
        if arr.size and not np.all(np.isfinite(arr)):
            v.append(f"missing or non-finite values in experimental {name}")
    for name, arr in (("covariates", pop.covariates), ("outcome", pop.outcome)):
        if arr.size and not np.all(np.isfinite(arr)):
            v.append(f"missing or non-finite values in population {name}")
    if pop.treatment is not None and not np.all(np.isin(pop.treatment, (0.0, 1.0))):
        v.append("population treatment must be binary 0/1")
    d = len(exp.covariate_names)
    if pop.N < d + 2:
        v.append(f"population sample too small (N={pop.N} < d+2={d + 2})")
    exp_names, pop_names = set(exp.covariate_names), set(pop.covariate_names)
    for name in sorted(exp_names - pop_names):
        v.append(f"covariate mismatch: {name}")
    for name in sorted(pop_names - exp_names):
        v.append(f"covariate mismatch: {name} (population only)")
    return ValidationReport(v)


def split_by_arm(exp: ExperimentalSample):
    """Indices of treated and control units, original order kept."""
    t = exp.treatment
    return np.flatnonzero(t == 1), np.flatnonzero(t == 0)


# ---------------------------------------------------------------- CSV ingestion


def _columns_with_role(roles: Mapping[str, str], role: str):
    return [c for c, r in roles.items() if r == role]


def check_roles(roles: Mapping[str, str]):
    bad = {c: r for c, r in roles.items() if r not in ROLES}
    if bad:
        raise ValidationError([f"unknown role {r!r} for column {c!r}" for c, r in bad.items()])


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(Path(path), encoding="utf-8", sep=",", decimal=".", float_precision="round_trip")


def experiment_from_frame(df: pd.DataFrame, roles: Mapping[str, str]) -> ExperimentalSample:
    check_roles(roles)
    problems = []
    outcome = _columns_with_role(roles, "outcome")
    treat = _columns_with_role(roles, "treatment")
    covs = _columns_with_role(roles, "covariate")
    adj = _columns_with_role(roles, "adjust-covariate")
    proxy = _columns_with_role(roles, "proxy")
    if len(outcome) != 1:
        problems.append("experiment needs exactly one outcome column")
    if len(treat) != 1:
        problems.append("experiment needs exactly one treatment column")
    for c in outcome + treat + covs + adj + proxy:
        if c not in df.columns:
            role = roles[c]
            problems.append(f"experiment file lacks {role} column {c!r}")
    if problems:
        raise ValidationError(problems)
    if df[outcome + treat + covs + adj + proxy].isna().any().any():
        raise ValidationError(["experiment file has missing values"])
    adjust_names = tuple(covs + [c for c in adj if c not in covs])
    return ExperimentalSample(
        covariates=df[covs].to_numpy(float),
        covariate_names=tuple(covs),
        treatment=df[treat[0]].to_numpy(float),
        outcome=df[outcome[0]].to_numpy(float),
        adjust_covariates=df[list(adjust_names)].to_numpy(float),
        adjust_names=adjust_names,
        proxy=df[proxy[0]].to_numpy(float) if proxy else None,
    )


def population_from_frame(df: pd.DataFrame, roles: Mapping[str, str],
                          outcome_kind: str = "same-measure") -> PopulationSample:
    check_roles(roles)
    outcome = _columns_with_role(roles, "outcome")
    covs = _columns_with_role(roles, "covariate")
    treat = [c for c in _columns_with_role(roles, "treatment") if c in df.columns]
    problems = []
    if len(outcome) != 1:
        problems.append("population needs exactly one outcome column")
    for c in outcome + covs:
        if c not in df.columns:
            problems.append(f"population file lacks {roles[c]} column {c!r}")
    if problems:
        raise ValidationError(problems)
    if df[outcome + covs + treat].isna().any().any():
        raise ValidationError(["population file has missing values"])
    return PopulationSample(
        covariates=df[covs].to_numpy(float),
        covariate_names=tuple(covs),
        outcome=df[outcome[0]].to_numpy(float),
        outcome_kind=outcome_kind,
        treatment=df[treat[0]].to_numpy(float) if treat else None,
    )
