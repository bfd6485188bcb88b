"""Command-line entry point.

Subcommands: estimate, diagnose, weights, simulate, benchmark-loo.
Exit codes: 0 success, 2 input validation failure, 3 numerical failure.
Every report embeds the seed, a hash of the resolved configuration and the
library version; re-running with ``--config <report>`` reproduces it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (AnalysisSpec, experiment_from_frame, population_from_frame, read_csv, validate_pair)
from .diagnostics import all_diagnostics, proxy_error_decomposition
from .estimators import METHODS, all_estimates, difference_in_means
from .exceptions import InputError, NumericalError, PostresError, RankDeficient, ValidationError
from .oracles import oracle_report
from .residualizer import ResidualizerSpec, fit_residualizer, predict_experiment
from .simulation import DEFAULT_ROLES, ScenarioConfig, export_replication, run_scenario
from .weights import estimate_weights

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
WEIGHT_METHODS = {"logistic": "logistic", "ebal": "entropy-balance", "entropy-balance": "entropy-balance"}
# residualized estimator -> diagnostic variant that speaks for it
RECOMMENDER = {"W_res": "W", "wLS_res": "wLS", "W_cov": "W_cov", "wLS_cov": "wLS_cov"}

DEFAULTS = {
    "experiment": None,
    "population": None,
    "roles": None,
    "outcome": "Y",
    "treatment": "T",
    "site": "site",
    "proxy": None,
    "covariates": None,
    "adjust": None,
    "outcome_kind": "same-measure",
    "weights": "ebal",
    "weight_cap": None,
    "learner": "ols-int",
    "fit_subset": None,
    "folds": 5,
    "splits": None,
    "literal_direction": False,
    "seed": 0,
    "level": 0.95,
    "estimators": list(METHODS),
    "cv_r2_threshold": 0.5,
    "format": "json",
    "simulation": {},
}


class StepError(Exception):
    """Wraps a library error with the name of the pipeline step that raised it."""

    def __init__(self, step, err):
        super().__init__(f"{step}: {type(err).__name__}: {err}")
        self.step = step
        self.err = err


def _step(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PostresError as e:
        raise StepError(name, e) from e


# ------------------------------------------------------------------ config


def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ValidationError([f"config {path} is not a key-value document"])
    # a previous report can serve as its own config
    if "config" in doc and "config_hash" in doc:
        doc = doc["config"]
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ValidationError([f"unknown config key {k!r}" for k in unknown])
    return doc


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and key != "simulation":
            cfg[key] = val
    if args.command == "simulate":
        sim = dict(cfg.get("simulation") or {})
        for key in SIM_FLAGS:
            val = getattr(args, key, None)
            if val is not None:
                sim[key] = val
        cfg["simulation"] = sim
    if isinstance(cfg["estimators"], str):
        cfg["estimators"] = [m.strip() for m in cfg["estimators"].split(",") if m.strip()]
    for key in ("covariates", "adjust"):
        if isinstance(cfg[key], str):
            cfg[key] = [c.strip() for c in cfg[key].split(",") if c.strip()]
    if cfg["weights"] not in WEIGHT_METHODS:
        raise ValidationError([f"unknown weight method {cfg['weights']!r}"])
    bad = [m for m in cfg["estimators"] if m not in METHODS]
    if bad:
        raise ValidationError([f"unknown estimator {m!r}" for m in bad])
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def analysis_spec(cfg) -> AnalysisSpec:
    return AnalysisSpec(weight_method=WEIGHT_METHODS[cfg["weights"]], learner=cfg["learner"],
                        estimators=tuple(cfg["estimators"]), splits=cfg["splits"], seed=int(cfg["seed"]),
                        level=float(cfg["level"]))


def resolve_roles(cfg, columns) -> dict:
    if cfg["roles"]:
        return dict(cfg["roles"])
    roles = {}
    special = {cfg["outcome"]: "outcome", cfg["treatment"]: "treatment"}
    if cfg["site"]:
        special[cfg["site"]] = "site"
    if cfg["proxy"]:
        special[cfg["proxy"]] = "proxy"
    roles.update(special)
    covs = cfg["covariates"] if cfg["covariates"] is not None else [c for c in columns if c not in special]
    for c in covs:
        roles[c] = "covariate"
    for c in cfg["adjust"] or ():
        roles.setdefault(c, "adjust-covariate")
    return roles


def _population_roles(roles):
    return {c: r for c, r in roles.items() if r in ("outcome", "covariate", "treatment")}


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ValidationError([f"missing required option --{k}" for k in missing])


def load_pair(cfg):
    _require(cfg, "experiment", "population")
    exp_df = read_csv(cfg["experiment"])
    pop_df = read_csv(cfg["population"])
    roles = resolve_roles(cfg, list(exp_df.columns))
    exp = experiment_from_frame(exp_df, roles)
    pop = population_from_frame(pop_df, _population_roles(roles), cfg["outcome_kind"])
    validate_pair(exp, pop).raise_if_invalid()
    return exp, pop


def _res_spec(cfg, default_subset="all-population"):
    return ResidualizerSpec(learner=cfg["learner"], folds=int(cfg["folds"]), seed=int(cfg["seed"]),
                            fit_subset=cfg["fit_subset"] or default_subset)


# ------------------------------------------------------------------ pipeline


def analyze(exp, pop, cfg, default_subset="all-population") -> dict:
    """Weights, residualizer, estimators and diagnostics for one pair."""
    spec = analysis_spec(cfg)
    w = _step("weights.estimate_weights", estimate_weights, exp, pop, spec.weight_method, cfg["weight_cap"])
    model = _step("residualizer.fit_residualizer", fit_residualizer, _res_spec(cfg, default_subset), pop)
    yhat = _step("residualizer.predict_experiment", predict_experiment, model, exp)
    est = {}
    for m in spec.estimators:
        try:
            est[m] = all_estimates(exp, w, yhat=yhat, level=spec.level, methods=(m,))[m]
        except RankDeficient as e:
            # a constant Y-hat cannot enter as a regressor; report the rest
            est[m] = str(e)
        except PostresError as e:
            raise StepError(f"estimators.{m}", e) from e
    diag = _step("diagnostics.all_diagnostics", all_diagnostics, exp, w, yhat=yhat, splits=spec.splits,
                 seed=spec.seed, literal_direction=bool(cfg["literal_direction"]))
    return {"weights": w, "model": model, "yhat": yhat, "estimates": est, "diagnostics": diag}


def _estimate_rows(est, diag):
    rows = []
    for m, r in est.items():
        d = {"method": m, "unavailable": r} if isinstance(r, str) else r.to_dict()
        if m in RECOMMENDER:
            d["recommend"] = diag[RECOMMENDER[m]].recommend_residualize
        rows.append(d)
    return rows


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _oracle(exp, res):
    try:
        return _clean(oracle_report(exp, res["weights"], res["yhat"]))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        return {"unavailable": str(e)}


def cmd_estimate(cfg) -> dict:
    exp, pop = load_pair(cfg)
    res = analyze(exp, pop, cfg)
    return {
        "weights": _clean(res["weights"].summary()),
        "residualizer": _clean(res["model"].summary()),
        "estimates": _clean(_estimate_rows(res["estimates"], res["diagnostics"])),
        "diagnostics": _clean([d.to_dict() for d in res["diagnostics"].values()]),
        "oracle": _oracle(exp, res),
    }


def triage(cv_mse, pop_outcome, r2_0, threshold) -> dict:
    """Low CV error means the model predicts population outcomes well; if it
    still fails on experimental controls, flag an external-validity problem."""
    var = float(np.var(pop_outcome))
    cv_r2 = None if cv_mse is None or not np.isfinite(cv_mse) or var == 0 else 1.0 - cv_mse / var
    low_cv = cv_r2 is not None and cv_r2 >= threshold
    low_r2 = r2_0 is None or r2_0 <= 0
    return {"cv_r2": cv_r2, "low_cv_error": bool(low_cv), "low_r2": bool(low_r2),
            "external_validity_warning": bool(low_cv and r2_0 is not None and r2_0 <= 0)}


def cmd_diagnose(cfg) -> dict:
    exp, pop = load_pair(cfg)
    spec = analysis_spec(cfg)
    w = _step("weights.estimate_weights", estimate_weights, exp, pop, spec.weight_method, cfg["weight_cap"])
    model = _step("residualizer.fit_residualizer", fit_residualizer, _res_spec(cfg), pop)
    yhat = _step("residualizer.predict_experiment", predict_experiment, model, exp)
    diag = _step("diagnostics.all_diagnostics", all_diagnostics, exp, w, yhat=yhat, splits=spec.splits,
                 seed=spec.seed, literal_direction=bool(cfg["literal_direction"]))
    out = {
        "residualizer": _clean(model.summary()),
        "cv_mse": _clean(model.cv_mse),
        "diagnostics": _clean([d.to_dict() for d in diag.values()]),
        "triage": _clean(triage(model.cv_mse, pop.outcome, diag["W"].r2_0, float(cfg["cv_r2_threshold"]))),
    }
    if exp.proxy is not None:
        out["proxy_decomposition"] = _clean(proxy_error_decomposition(exp, proxy=exp.proxy, yhat=yhat).to_dict())
    return out


def cmd_weights(cfg) -> dict:
    exp, pop = load_pair(cfg)
    w = _step("weights.estimate_weights", estimate_weights, exp, pop, WEIGHT_METHODS[cfg["weights"]],
              cfg["weight_cap"])
    return {"weights": _clean(w.summary()), "unit_weights": _clean(list(w.weights))}


def cmd_benchmark_loo(cfg) -> dict:
    """Each site in turn is the experiment; the pooled other sites are the
    population and their difference in means is the benchmark."""
    _require(cfg, "experiment")
    df = read_csv(cfg["experiment"])
    site_col = cfg["site"]
    if site_col not in df.columns:
        raise ValidationError([f"benchmark file lacks site column {site_col!r}"])
    roles = resolve_roles(cfg, list(df.columns))
    roles.pop(site_col, None)
    sites = sorted(df[site_col].unique(), key=lambda s: (str(type(s)), s))
    rows, skipped = [], []
    errors = {m: [] for m in cfg["estimators"]}
    for s in sites:
        inside = df[df[site_col] == s].reset_index(drop=True)
        others = df[df[site_col] != s].reset_index(drop=True)
        try:
            exp = experiment_from_frame(inside, roles)
            pool = experiment_from_frame(others, roles)
            pop = population_from_frame(others, _population_roles(roles), cfg["outcome_kind"])
            report = validate_pair(exp, pop)
            if not report.ok:
                skipped.append({"site": _clean(s), "reason": "; ".join(report.violations)})
                continue
            bench = difference_in_means(pool, float(cfg["level"])).tau_hat
            res = analyze(exp, pop, cfg, default_subset="population-controls")
        except (PostresError, StepError) as e:
            skipped.append({"site": _clean(s), "reason": str(e)})
            continue
        est = _estimate_rows(res["estimates"], res["diagnostics"])
        for r in est:
            if "tau_hat" in r:
                errors[r["method"]].append(abs(r["tau_hat"] - bench))
        rows.append({"site": _clean(s), "n": exp.n, "benchmark": bench, "estimates": _clean(est),
                     "diagnostics": _clean([d.to_dict() for d in res["diagnostics"].values()])})
    mae = {m: (float(np.mean(v)) if v else None) for m, v in errors.items()}
    return {"sites": rows, "skipped": skipped, "mean_absolute_error": mae}


SIM_FLAGS = ("scenario", "beta_s", "n", "N", "reps", "p_treat", "alpha_tau", "noise_sd", "selection_strength",
             "true_weights", "sampling", "export_one")


def _scenario_configs(cfg):
    sim = dict(cfg["simulation"])
    sim.pop("export_one", None)
    betas = sim.pop("beta_s", [0.0])
    if not isinstance(betas, (list, tuple)):
        betas = [betas]
    base = dict(sim, seed=int(cfg["seed"]), learner=cfg["learner"], splits=cfg["splits"],
                literal_direction=bool(cfg["literal_direction"]))
    try:
        return [ScenarioConfig(**dict(base, beta_s=float(b))) for b in betas]
    except (TypeError, ValueError) as e:
        raise ValidationError([f"simulation config: {e}"]) from e


def cmd_simulate(cfg, out=None, workers=1) -> dict:
    configs = _scenario_configs(cfg)
    rep = cfg["simulation"].get("export_one")
    if rep is not None:
        out_dir = Path(out or ".")
        out_dir = out_dir.parent if out_dir.suffix else out_dir
        paths = export_replication(configs[0], int(rep), out_dir)
        return {"exported": [p.name for p in paths], "roles": DEFAULT_ROLES}
    summaries = [run_scenario(c, workers=workers) for c in configs]
    return {
        "estimators": [row for s in summaries for row in s.estimator_rows()],
        "diagnostics": [row for s in summaries for row in s.diagnostic_rows()],
        "failures": sum(s.failures for s in summaries),
        "summaries": [json.loads(s.to_json()) for s in summaries],
    }


COMMANDS = {
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "weights": cmd_weights,
    "simulate": cmd_simulate,
    "benchmark-loo": cmd_benchmark_loo,
}


# ------------------------------------------------------------------ output


def _csv_tables(command, body):
    """Flat tables for --format csv, keyed by file suffix."""
    if command == "estimate":
        return {"": [dict(r, ci_low=r["ci"][0], ci_high=r["ci"][1]) if "ci" in r else r for r in body["estimates"]]}
    if command == "diagnose":
        return {"": [dict(d, **body["triage"], cv_mse=body["cv_mse"]) for d in body["diagnostics"]]}
    if command == "weights":
        return {"": [{"unit": i, "weight": w} for i, w in enumerate(body["unit_weights"])]}
    if command == "simulate":
        if "exported" in body:
            return {"": [{"path": p} for p in body["exported"]]}
        return {"": body["estimators"], "_diagnostics": body["diagnostics"]}
    rows = []
    for s in body["sites"]:
        for e in s["estimates"]:
            rows.append({"site": s["site"], "benchmark": s["benchmark"], "method": e["method"],
                         "tau_hat": e.get("tau_hat"), "se": e.get("se")})
    return {"": rows}


def _write_csv(rows, meta):
    buf = io.StringIO()
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys and k != "ci")
    fields = keys + list(meta)
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({**{k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()}, **meta})
    return buf.getvalue()


def render(command, cfg, body, fmt) -> dict:
    """Returns {suffix: text}.  JSON output is a single document."""
    meta = {"seed": int(cfg["seed"]), "config_hash": config_hash(cfg), "version": __version__}
    if fmt == "json":
        doc = {"command": command, **meta, "config": cfg, **body}
        return {"": json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"}
    return {suffix: _write_csv(rows, meta) for suffix, rows in _csv_tables(command, body).items()}


def _emit(outputs, out):
    if not out:
        for text in outputs.values():
            sys.stdout.write(text)
        return
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for suffix, text in outputs.items():
        path = out if not suffix else out.with_name(out.stem + suffix + out.suffix)
        path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="postres", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config; a previous report also works")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file (default stdout)")
    common.add_argument("--format", choices=("json", "csv"))
    common.add_argument("--learner", choices=("ols-int", "ridge", "lasso", "stack", "zero", "mean"))
    common.add_argument("--splits", type=int, help="cross-fit repetitions for the covariate diagnostic")
    common.add_argument("--literal-direction", action="store_true", default=None,
                        help="fit the diagnostic scaling coefficient by regressing Y-hat on Y")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--experiment")
    data.add_argument("--population")
    data.add_argument("--weights", choices=("logistic", "ebal"))
    data.add_argument("--weight-cap", type=float, dest="weight_cap")
    data.add_argument("--outcome", help="outcome column (default Y)")
    data.add_argument("--treatment", help="treatment column (default T)")
    data.add_argument("--proxy", help="proxy outcome column in the experiment file")
    data.add_argument("--site", help="site column (default 'site')")
    data.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    data.add_argument("--adjust", help="comma-separated extra adjustment columns for wLS")
    data.add_argument("--outcome-kind", choices=("same-measure", "proxy"), dest="outcome_kind")
    data.add_argument("--fit-subset", choices=("all-population", "population-controls"), dest="fit_subset")
    data.add_argument("--estimators", help="comma-separated subset of " + ",".join(METHODS))
    data.add_argument("--level", type=float)

    for name, help_ in (("estimate", "run the full pipeline and report every estimator"),
                        ("diagnose", "pseudo-R^2 diagnostics and triage"),
                        ("weights", "sampling weights only"),
                        ("benchmark-loo", "leave-one-site-out benchmark")):
        sub.add_parser(name, parents=[common, data], help=help_)

    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo scenarios")
    sim.add_argument("--scenario", type=int, choices=(1, 2, 3, 4))
    sim.add_argument("--beta-s", type=float, nargs="+", dest="beta_s")
    sim.add_argument("--n", type=int)
    sim.add_argument("--N", type=int, dest="N")
    sim.add_argument("--reps", type=int)
    sim.add_argument("--p-treat", type=float, dest="p_treat")
    sim.add_argument("--alpha-tau", type=float, dest="alpha_tau")
    sim.add_argument("--noise-sd", type=float, dest="noise_sd")
    sim.add_argument("--selection-strength", type=float, dest="selection_strength")
    sim.add_argument("--sampling", choices=("fixed", "bernoulli"))
    sim.add_argument("--true-weights", action="store_true", default=None, dest="true_weights")
    sim.add_argument("--workers", type=int)
    sim.add_argument("--export-one", type=int, nargs="?", const=0, dest="export_one", metavar="REP",
                     help="write one replication's experiment/population CSVs and stop")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "simulate":
            # the worker count never changes results, so it stays out of the config and its hash
            body = cmd_simulate(cfg, out=args.out, workers=args.workers or 1)
        else:
            body = COMMANDS[args.command](cfg)
        # with --export-one, --out names the CSV directory and the report goes to stdout
        out = None if "exported" in body else args.out
        _emit(render(args.command, cfg, body, cfg["format"]), out)
    except ValidationError as e:
        for v in e.violations:
            print(f"error: {v}", file=sys.stderr)
        return EXIT_INPUT
    except StepError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e.err, NumericalError) else EXIT_INPUT
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
