import json

import numpy as np
import pandas as pd
import pytest

from postres.cli import run
from postres.residualizer import ResidualizerSpec, fit_residualizer, predict_experiment
from postres.estimators import all_estimates
from postres.simulation import ScenarioConfig, draw_replication


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    d = tmp_path_factory.mktemp("export")
    assert run(["simulate", "--scenario", "1", "--seed", "11", "--n", "400", "--N", "2000",
                "--export-one", "--out", str(d)]) == 0
    return d / "scenario1_seed11_rep0_experiment.csv", d / "scenario1_seed11_rep0_population.csv"


def _json(path):
    return json.loads(path.read_text())


def test_export_files_exist_with_seed(exported):
    for p in exported:
        assert p.exists() and "seed11" in p.name


def test_round_trip_bitwise(exported, tmp_path):
    out = tmp_path / "r.json"
    assert run(["estimate", "--experiment", str(exported[0]), "--population", str(exported[1]),
                "--seed", "11", "--out", str(out)]) == 0
    r = draw_replication(ScenarioConfig(scenario=1, seed=11, n=400, N=2000), 0)
    model = fit_residualizer(ResidualizerSpec("ols-interactions", compute_cv=False), r.pop)
    est = all_estimates(r.exp, r.weights, yhat=predict_experiment(model, r.exp))
    for row in _json(out)["estimates"]:
        assert row["tau_hat"] == est[row["method"]].tau_hat
        assert row["se"] == est[row["method"]].se


def test_report_contents_and_rerun(exported, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(["estimate", "--experiment", str(exported[0]), "--population", str(exported[1]), "--out", str(a)]) == 0
    rep = _json(a)
    for key in ("seed", "config_hash", "version", "weights", "residualizer", "estimates", "diagnostics", "oracle"):
        assert key in rep
    assert rep["residualizer"]["cv_mse"] > 0
    recs = {e["method"]: e.get("recommend") for e in rep["estimates"]}
    assert recs["W_res"] is not None and "recommend" not in [k for e in rep["estimates"] if e["method"] == "W" for k in e]
    assert run(["estimate", "--config", str(a), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_zero_learner_identity(exported, tmp_path):
    out = tmp_path / "z.json"
    assert run(["estimate", "--experiment", str(exported[0]), "--population", str(exported[1]),
                "--learner", "zero", "--out", str(out)]) == 0
    est = {e["method"]: e for e in _json(out)["estimates"]}
    assert est["W_res"]["tau_hat"] == est["W"]["tau_hat"]
    assert est["wLS_res"]["tau_hat"] == est["wLS"]["tau_hat"]
    assert "unavailable" in est["W_cov"]


def test_missing_treatment_exit_2(exported, capsys):
    rc = run(["estimate", "--experiment", str(exported[0]), "--population", str(exported[1]), "--treatment", "D"])
    assert rc == 2
    assert "treatment" in capsys.readouterr().err


def test_missing_file_exit_2(tmp_path):
    assert run(["estimate", "--experiment", str(tmp_path / "nope.csv"), "--population", str(tmp_path / "x.csv")]) == 2


def test_infeasible_balance_exit_3(tmp_path, capsys):
    rng = np.random.default_rng(0)
    e = pd.DataFrame({"x": rng.uniform(0, 1, 40), "T": np.r_[np.ones(20), np.zeros(20)].astype(int),
                      "Y": rng.standard_normal(40)})
    p = pd.DataFrame({"x": rng.uniform(5, 6, 50), "Y": rng.standard_normal(50)})
    e.to_csv(tmp_path / "e.csv", index=False)
    p.to_csv(tmp_path / "p.csv", index=False)
    rc = run(["estimate", "--experiment", str(tmp_path / "e.csv"), "--population", str(tmp_path / "p.csv")])
    assert rc == 3
    assert "weights.estimate_weights" in capsys.readouterr().err


def test_csv_format(exported, tmp_path):
    out = tmp_path / "e.csv"
    assert run(["estimate", "--experiment", str(exported[0]), "--population", str(exported[1]),
                "--format", "csv", "--out", str(out)]) == 0
    df = pd.read_csv(out)
    assert len(df) == 7 and {"seed", "config_hash", "version", "ci_low", "ci_high"} <= set(df.columns)


def test_weights_command(exported, tmp_path):
    out = tmp_path / "w.json"
    assert run(["weights", "--experiment", str(exported[0]), "--population", str(exported[1]),
                "--weights", "logistic", "--out", str(out)]) == 0
    rep = _json(out)
    assert len(rep["unit_weights"]) == 400
    assert np.mean(rep["unit_weights"]) == pytest.approx(1.0)


def _perfect_pair(tmp_path, seed=0):
    rng = np.random.default_rng(seed)
    def frame(n, shift, treat):
        x = rng.standard_normal((n, 2)) + shift
        T = (rng.permutation(n) < n // 2).astype(int) if treat else np.zeros(n, int)
        return pd.DataFrame({"a": x[:, 0], "b": x[:, 1], "T": T, "Y": 2 * x[:, 0] - x[:, 1] + T})
    frame(300, 0.3, True).to_csv(tmp_path / "pe.csv", index=False)
    frame(1000, 0.0, False).drop(columns="T").to_csv(tmp_path / "pp.csv", index=False)
    return tmp_path / "pe.csv", tmp_path / "pp.csv"


def test_diagnose_perfect_fit(tmp_path):
    e, p = _perfect_pair(tmp_path)
    out = tmp_path / "d.json"
    assert run(["diagnose", "--experiment", str(e), "--population", str(p), "--out", str(out)]) == 0
    rep = _json(out)
    assert rep["diagnostics"][0]["recommend"] is True
    assert rep["triage"]["external_validity_warning"] is False


def test_diagnose_warning_on_diverging_populations(tmp_path):
    assert run(["simulate", "--scenario", "3", "--beta-s", "5", "--seed", "3", "--export-one",
                "--out", str(tmp_path)]) == 0
    out = tmp_path / "d.json"
    assert run(["diagnose", "--experiment", str(tmp_path / "scenario3_seed3_rep0_experiment.csv"),
                "--population", str(tmp_path / "scenario3_seed3_rep0_population.csv"), "--out", str(out)]) == 0
    t = _json(out)["triage"]
    assert t["low_cv_error"] and t["low_r2"] and t["external_validity_warning"]


def test_diagnose_permuted_population_no_warning(exported, tmp_path):
    pop = pd.read_csv(exported[1])
    pop["Y"] = np.random.default_rng(0).permutation(pop["Y"].to_numpy())
    pop.to_csv(tmp_path / "perm.csv", index=False)
    out = tmp_path / "d.json"
    assert run(["diagnose", "--experiment", str(exported[0]), "--population", str(tmp_path / "perm.csv"),
                "--out", str(out)]) == 0
    t = _json(out)["triage"]
    assert not t["low_cv_error"] and not t["external_validity_warning"]


def test_diagnose_proxy(exported, tmp_path):
    e = pd.read_csv(exported[0])
    e["P"] = e["Y"] + 1.0
    e.to_csv(tmp_path / "e.csv", index=False)
    out = tmp_path / "d.json"
    assert run(["diagnose", "--experiment", str(tmp_path / "e.csv"), "--population", str(exported[1]),
                "--proxy", "P", "--out", str(out)]) == 0
    assert _json(out)["proxy_decomposition"]["measure_gap_var"] == pytest.approx(0.0, abs=1e-20)


def multisite(path, sites=16, constant_site=None, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for s in range(sites):
        x = rng.standard_normal((120, 2))
        T = (rng.permutation(120) < 60).astype(int)
        y = x[:, 0] + 0.5 * x[:, 1] + T + rng.standard_normal(120)
        if s == constant_site:
            y = np.where(T == 0, 0.0, y)
        rows.append(pd.DataFrame({"site": s, "a": x[:, 0], "b": x[:, 1], "T": T, "Y": y}))
    pd.concat(rows).to_csv(path, index=False)
    return path


def test_benchmark_loo_rows_and_undefined(tmp_path):
    f = multisite(tmp_path / "m.csv", constant_site=4)
    out = tmp_path / "b.json"
    assert run(["benchmark-loo", "--experiment", str(f), "--splits", "2", "--out", str(out)]) == 0
    rep = _json(out)
    assert len(rep["sites"]) == 16 and not rep["skipped"]
    site4 = next(s for s in rep["sites"] if s["site"] == 4)
    assert all(d["r2_0"] is None for d in site4["diagnostics"])
    assert set(rep["mean_absolute_error"]) == {"DiM", "W", "W_res", "W_cov", "wLS", "wLS_res", "wLS_cov"}


def test_benchmark_loo_exchangeable_sites(tmp_path):
    f = multisite(tmp_path / "m.csv", sites=2)
    out = tmp_path / "b.json"
    assert run(["benchmark-loo", "--experiment", str(f), "--splits", "2", "--out", str(out)]) == 0
    df = pd.read_csv(f)
    for s in _json(out)["sites"]:
        other = df[df.site != s["site"]]
        y1, y0 = other.Y[other["T"] == 1], other.Y[other["T"] == 0]
        se_bench = np.sqrt(y1.var() / len(y1) + y0.var() / len(y0))
        for e in s["estimates"]:
            # both sides are noisy; compare the gap with their combined SE
            assert abs(e["tau_hat"] - s["benchmark"]) <= 3 * np.hypot(e["se"], se_bench)


def test_benchmark_loo_skips_degenerate_site(tmp_path):
    f = multisite(tmp_path / "m.csv", sites=3)
    df = pd.read_csv(f)
    df.loc[df.site == 1, "T"] = 1
    df.to_csv(f, index=False)
    out = tmp_path / "b.json"
    assert run(["benchmark-loo", "--experiment", str(f), "--splits", "2", "--out", str(out)]) == 0
    rep = _json(out)
    assert len(rep["sites"]) == 2 and rep["skipped"][0]["site"] == 1


def test_simulate_tables(tmp_path):
    out = tmp_path / "sim.csv"
    assert run(["simulate", "--scenario", "3", "--beta-s", "-2", "2", "--n", "200", "--N", "1000",
                "--reps", "3", "--splits", "1", "--format", "csv", "--out", str(out)]) == 0
    est = pd.read_csv(out)
    diag = pd.read_csv(tmp_path / "sim_diagnostics.csv")
    assert list(est.columns[:8]) == ["scenario", "beta_s", "n", "estimator", "mse", "bias", "se", "coverage"]
    assert len(est) == 14 and len(diag) == 8
    assert {"tpr", "tnr"} <= set(diag.columns)


def test_yaml_config(exported, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"experiment: {exported[0]}\npopulation: {exported[1]}\nlearner: ridge\nseed: 4\n")
    out = tmp_path / "o.json"
    assert run(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
    rep = _json(out)
    assert rep["seed"] == 4 and rep["residualizer"]["learner"] == "ridge"


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("bogus: 1\n")
    assert run(["estimate", "--config", str(cfg)]) == 2
