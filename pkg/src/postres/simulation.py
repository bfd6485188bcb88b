"""Monte Carlo harness for the four outcome scenarios.

Each replication draws a covariate pool, a logit-biased experimental sample
and a uniform population sample, then runs the full pipeline (entropy
balancing, interaction OLS residualizer, seven estimators, four diagnostics).
Replication ``r`` draws from its own Philox stream keyed by ``(seed, r)``, so
results do not depend on how replications are spread over workers.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import ExperimentalSample, PopulationSample
from .diagnostics import all_diagnostics
from .estimators import METHODS, all_estimates
from .exceptions import PoolTooSmall, PostresError
from .residualizer import ResidualizerSpec, fit_residualizer, predict_experiment
from .weights import WeightVector, estimate_weights

SIGMA = np.array([
    [1.0, 0.0, 0.45, 0.5],
    [0.0, 1.0, 0.0, 0.0],
    [0.45, 0.0, 1.0, 0.9],
    [0.5, 0.0, 0.9, 1.0],
])
CHOL = np.linalg.cholesky(SIGMA)
# pool columns
X1, X2, XS, XTAU = range(4)
OBSERVED = ("X1", "X2", "Xtau")
DIAG_VARIANTS = ("W", "wLS", "W_cov", "wLS_cov")
# diagnostic variant -> (estimator with residualizing, estimator without)
DIAG_PAIRS = {"W": ("W_res", "W"), "wLS": ("wLS_res", "wLS"), "W_cov": ("W_cov", "W"), "wLS_cov": ("wLS_cov", "wLS")}

# (beta1, beta2, beta3, gamma1, gamma2, gamma3, gamma4, alpha)
SCENARIOS = {
    1: (2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    2: (2.0, 1.0, 0.0, 0.5, 3.0, 2.5, 0.0, 0.0),
    3: (2.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.5),
    4: (2.0, 1.0, -1.0, 0.5, 3.0, 2.5, 1.5, 0.5),
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int = 1
    beta_s: float = 0.0
    n: int = 1000
    N: int = 10_000
    reps: int = 1000
    p_treat: float = 0.5
    alpha_tau: float = 1.0
    noise_sd: float = 1.0
    seed: int = 0
    pool_factor: int = 10
    selection_strength: float = 1.0
    sampling: str = "fixed"
    pop_treat_prob: float | None = None
    true_weights: bool = False
    learner: str = "ols-interactions"
    splits: int | None = None
    literal_direction: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {sorted(SCENARIOS)}")
        if self.scenario in (1, 2) and self.beta_s != 0:
            raise ValueError("scenarios 1 and 2 have identical population/sample outcomes (beta_s = 0)")
        if not self.n <= self.N:
            raise ValueError("need n <= N")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if not 0 < self.p_treat < 1:
            raise ValueError("p_treat must lie in (0, 1)")
        if self.sampling not in ("fixed", "bernoulli"):
            raise ValueError("sampling must be 'fixed' or 'bernoulli'")

    @property
    def population_treat_prob(self) -> float:
        return self.p_treat if self.pop_treat_prob is None else self.pop_treat_prob

    def key(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


def draw_population(config: ScenarioConfig, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Pool of i.i.d. (X1, X2, X_S, X_tau) rows from N(0, SIGMA)."""
    m = config.pool_factor * config.N if size is None else size
    return rng.standard_normal((m, 4)) @ CHOL.T


def draw_samples(pool: np.ndarray, n: int, N: int, rng: np.random.Generator, *,
                 strength: float = 1.0, sampling: str = "fixed"):
    """Experimental indices drawn with probability proportional to
    expit(strength * X_S) without replacement, then ``N`` population indices
    uniformly from the rest.  Both index arrays are sorted."""
    m = len(pool)
    if n + N > m:
        raise PoolTooSmall(f"pool of {m} cannot supply n={n} plus N={N} disjoint units")
    prob = expit(strength * pool[:, XS])
    if sampling == "fixed":
        if n == m:
            exp_idx = np.arange(m)
        else:
            # Efraimidis-Spirakis keys: log(u) / weight, keep the n largest
            keys = np.log(rng.random(m)) / prob
            exp_idx = np.sort(np.argpartition(-keys, n - 1)[:n]) if n else np.zeros(0, dtype=np.int64)
    else:
        q = np.minimum(1.0, prob * n / prob.sum())
        exp_idx = np.flatnonzero(rng.random(m) < q)
    rest = np.setdiff1d(np.arange(m), exp_idx, assume_unique=True)
    if N > len(rest):
        raise PoolTooSmall("not enough units left for the population sample")
    pop_idx = np.sort(rng.choice(rest, size=N, replace=False))
    return exp_idx, pop_idx


def outcome_model(config: ScenarioConfig, draws: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Noise-free Y(0) for the configured scenario."""
    b1, b2, b3, g1, g2, g3, g4, alpha = SCENARIOS[config.scenario]
    x1, x2 = draws[:, X1], draws[:, X2]
    y0 = b1 * x1 + b2 * x2 + g1 * x1 ** 2 + g2 * np.sqrt(np.abs(x2)) + g3 * x1 * x2
    if config.beta_s:
        y0 = y0 + config.beta_s * (1 - S) * (alpha + b3 * x1 + g4 * x1 * x2)
    return y0


def generate_outcomes(config: ScenarioConfig, draws: np.ndarray, S, T, rng: np.random.Generator):
    """Returns (Y, Y0, Y1, pate_true); tau_i = alpha_tau + X_tau,i."""
    S = np.asarray(S, dtype=float)
    T = np.asarray(T, dtype=float)
    eps = rng.normal(0.0, config.noise_sd, len(draws)) if config.noise_sd > 0 else np.zeros(len(draws))
    y0 = outcome_model(config, draws, S) + eps
    tau = config.alpha_tau + draws[:, XTAU]
    y1 = y0 + tau
    return y0 + tau * T, y0, y1, float(config.alpha_tau)


def complete_randomization(n, p, rng):
    n1 = int(round(p * n))
    T = np.zeros(n)
    T[rng.permutation(n)[:n1]] = 1.0
    return T


@dataclass(frozen=True, eq=False)
class Replication:
    exp: ExperimentalSample
    pop: PopulationSample
    weights: WeightVector
    pate: float
    xs: np.ndarray


def draw_replication(config: ScenarioConfig, rep: int) -> Replication:
    """All random draws of one replication, in a fixed order."""
    rng = replication_rng(config.seed, rep)
    pool = draw_population(config, rng)
    exp_idx, pop_idx = draw_samples(pool, config.n, config.N, rng, strength=config.selection_strength,
                                    sampling=config.sampling)
    n, N = len(exp_idx), len(pop_idx)
    T = complete_randomization(n, config.p_treat, rng)
    T_pop = (rng.random(N) < config.population_treat_prob).astype(float)
    draws = np.vstack([pool[exp_idx], pool[pop_idx]])
    S = np.concatenate([np.ones(n), np.zeros(N)])
    Y, _, _, pate = generate_outcomes(config, draws, S, np.concatenate([T, T_pop]), rng)
    obs = draws[:, [X1, X2, XTAU]]
    exp = ExperimentalSample(obs[:n], OBSERVED, T, Y[:n])
    pop = PopulationSample(obs[n:], OBSERVED, Y[n:], treatment=T_pop)
    if config.true_weights:
        w = WeightVector(1.0 / expit(config.selection_strength * pool[exp_idx, XS]), method="true")
    else:
        w = estimate_weights(exp, pop, "entropy-balance")
    return Replication(exp, pop, w, pate, pool[exp_idx, XS])


def run_pipeline(config: ScenarioConfig, exp, pop, w, diag_seed):
    """Residualizer, estimators and diagnostics for one drawn data set."""
    model = fit_residualizer(ResidualizerSpec(learner=config.learner, compute_cv=False), pop)
    yhat = predict_experiment(model, exp)
    est = all_estimates(exp, w, yhat=yhat)
    diag = all_diagnostics(exp, w, yhat=yhat, splits=config.splits, seed=diag_seed,
                           literal_direction=config.literal_direction)
    return model, yhat, est, diag


def run_replication(config: ScenarioConfig, rep: int) -> dict:
    try:
        r = draw_replication(config, rep)
        _, _, est, diag = run_pipeline(config, r.exp, r.pop, r.weights, diag_seed=config.seed * 1_000_003 + rep)
    except PostresError as e:
        return {"rep": rep, "failed": f"{type(e).__name__}: {e}"}
    lo = np.array([est[m].ci[0] for m in METHODS])
    hi = np.array([est[m].ci[1] for m in METHODS])
    return {
        "rep": rep,
        "failed": None,
        "tau": np.array([est[m].tau_hat for m in METHODS]),
        "se": np.array([est[m].se for m in METHODS]),
        "hit": (lo <= r.pate) & (r.pate <= hi),
        "r2": np.array([np.nan if diag[v].r2_0 is None else diag[v].r2_0 for v in DIAG_VARIANTS]),
        "pate": r.pate,
        "ess": r.weights.ess,
    }


def _run_chunk(args):
    config, reps = args
    return [run_replication(config, r) for r in reps]


def run_replications(config: ScenarioConfig, workers: int | None = None) -> list:
    workers = config.workers if workers is None else workers
    reps = list(range(config.reps))
    if workers <= 1:
        return [run_replication(config, r) for r in reps]
    chunks = [reps[i::workers] for i in range(workers)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for res in pool.map(_run_chunk, [(config, c) for c in chunks if c]):
            out.extend(res)
    out.sort(key=lambda r: r["rep"])
    return out


# ------------------------------------------------------------------ summaries


def diagnostic_confusion(decisions, gains) -> dict:
    """True-positive / true-negative rates of residualize decisions against
    realized gains.  Rates are None when their denominator is zero."""
    d = np.asarray(decisions, dtype=bool)
    g = np.asarray(gains, dtype=bool)
    tp, pos = int(np.sum(d & g)), int(np.sum(g))
    tn, neg = int(np.sum(~d & ~g)), int(np.sum(~g))
    return {
        "tp": tp, "pos": pos, "tn": tn, "neg": neg,
        "tpr": tp / pos if pos else None,
        "tnr": tn / neg if neg else None,
    }


@dataclass
class SimulationSummary:
    config: dict
    pate_true: float
    reps_ok: int
    failures: int
    estimators: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    failure_messages: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=True)

    def estimator_rows(self):
        c = self.config
        for m, s in self.estimators.items():
            yield {"scenario": c["scenario"], "beta_s": c["beta_s"], "n": c["n"], "estimator": m,
                   "mse": s["mse"], "bias": s["bias"], "se": s["se_mean"], "coverage": s["coverage"], "sd": s["sd"]}

    def diagnostic_rows(self):
        c = self.config
        for v, s in self.diagnostics.items():
            yield {"scenario": c["scenario"], "beta_s": c["beta_s"], "n": c["n"], "variant": v, **s}


def summarize(config: ScenarioConfig, records: list) -> SimulationSummary:
    ok = [r for r in records if r["failed"] is None]
    failures = [r["failed"] for r in records if r["failed"] is not None]
    summary = SimulationSummary(config=config.key(), pate_true=float(config.alpha_tau), reps_ok=len(ok),
                                failures=len(failures), failure_messages=failures[:20])
    if not ok:
        return summary
    tau = np.array([r["tau"] for r in ok])
    se = np.array([r["se"] for r in ok])
    hit = np.array([r["hit"] for r in ok])
    r2 = np.array([r["r2"] for r in ok])
    err = tau - config.alpha_tau
    mc_var = tau.var(axis=0, ddof=1) if len(ok) > 1 else np.zeros(len(METHODS))
    for j, m in enumerate(METHODS):
        summary.estimators[m] = {
            "mse": float(np.mean(err[:, j] ** 2)),
            "bias": float(np.mean(err[:, j])),
            "se_mean": float(np.mean(se[:, j])),
            "sd": float(np.sqrt(mc_var[j])),
            "coverage": float(np.mean(hit[:, j])),
        }
    col = {m: j for j, m in enumerate(METHODS)}
    for k, v in enumerate(DIAG_VARIANTS):
        res, plain = DIAG_PAIRS[v]
        decisions = np.nan_to_num(r2[:, k], nan=-np.inf) > 0
        cell_gain = mc_var[col[res]] < mc_var[col[plain]]
        cell = diagnostic_confusion(decisions, np.full(len(ok), cell_gain))
        per_rep = diagnostic_confusion(decisions, se[:, col[res]] < se[:, col[plain]])
        summary.diagnostics[v] = {
            **cell,
            "cell_gain": bool(cell_gain),
            "tpr_rep": per_rep["tpr"], "tnr_rep": per_rep["tnr"],
            "tp_rep": per_rep["tp"], "pos_rep": per_rep["pos"], "tn_rep": per_rep["tn"], "neg_rep": per_rep["neg"],
            "undefined": int(np.sum(np.isnan(r2[:, k]))),
            "mean_r2": float(np.nanmean(r2[:, k])) if np.any(~np.isnan(r2[:, k])) else None,
        }
    return summary


def run_scenario(config: ScenarioConfig, workers: int | None = None) -> SimulationSummary:
    return summarize(config, run_replications(config, workers))


def export_replication(config: ScenarioConfig, rep: int, out_dir) -> tuple:
    """Write one replication's experiment and population CSVs.

    Columns follow the default role map (X1, X2, Xtau covariates; T; Y).
    Floats are written with 17 significant digits so a reload is exact.
    """
    import pandas as pd

    r = draw_replication(config, rep)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"scenario{config.scenario}_seed{config.seed}_rep{rep}"
    exp_df = pd.DataFrame(r.exp.covariates, columns=list(OBSERVED))
    exp_df["T"] = r.exp.treatment.astype(int)
    exp_df["Y"] = r.exp.outcome
    pop_df = pd.DataFrame(r.pop.covariates, columns=list(OBSERVED))
    pop_df["T"] = r.pop.treatment.astype(int)
    pop_df["Y"] = r.pop.outcome
    exp_path = out_dir / f"{stem}_experiment.csv"
    pop_path = out_dir / f"{stem}_population.csv"
    exp_df.to_csv(exp_path, index=False, float_format="%.17g")
    pop_df.to_csv(pop_path, index=False, float_format="%.17g")
    return exp_path, pop_path


DEFAULT_ROLES = {"X1": "covariate", "X2": "covariate", "Xtau": "covariate", "T": "treatment", "Y": "outcome"}
