import json

import numpy as np
import pytest

from postres.estimators import METHODS, all_estimates
from postres.exceptions import PoolTooSmall
from postres.residualizer import ResidualizerSpec, fit_residualizer, predict_experiment
from postres.simulation import (SIGMA, ScenarioConfig, diagnostic_confusion, draw_population, draw_replication,
                                draw_samples, generate_outcomes, outcome_model, replication_rng, run_replication,
                                run_scenario, summarize)


def test_covariance_matches_sigma():
    draws = draw_population(ScenarioConfig(), replication_rng(0, 0), size=200_000)
    assert np.max(np.abs(np.cov(draws.T) - SIGMA)) <= 0.02
    assert np.corrcoef(draws[:, 2], draws[:, 3])[0, 1] == pytest.approx(0.9, abs=0.01)


def test_selection_favours_high_xs():
    for seed in range(100):
        rng = replication_rng(seed, 0)
        pool = draw_population(ScenarioConfig(), rng, size=2000)
        e, p = draw_samples(pool, 200, 1000, rng)
        assert pool[e, 2].mean() > pool[:, 2].mean()
        assert len(np.intersect1d(e, p)) == 0
        assert len(e) == 200 and len(p) == 1000


def test_no_selection_signal_is_uniform():
    rng = replication_rng(1, 0)
    pool = draw_population(ScenarioConfig(), rng, size=50_000)
    pool[:, 2] = 0.0
    e, _ = draw_samples(pool, 5000, 10_000, rng)
    assert abs(pool[e, 3].mean()) < 0.05


def test_whole_pool_selected():
    pool = np.zeros((30, 4))
    e, p = draw_samples(pool, 30, 0, replication_rng(0, 0))
    assert np.array_equal(e, np.arange(30)) and len(p) == 0


def test_pool_too_small():
    with pytest.raises(PoolTooSmall):
        draw_samples(np.zeros((10, 4)), 6, 6, replication_rng(0, 0))


def test_bernoulli_sampling_size_near_target():
    rng = replication_rng(0, 0)
    pool = draw_population(ScenarioConfig(), rng, size=20_000)
    e, _ = draw_samples(pool, 1000, 5000, rng, sampling="bernoulli")
    assert abs(len(e) - 1000) < 150


def test_scenario_outcomes_by_hand():
    row = np.array([[1.0, 1.0, 0.0, 0.0]])
    assert outcome_model(ScenarioConfig(scenario=1), row, np.ones(1))[0] == 3.0
    assert outcome_model(ScenarioConfig(scenario=2), row, np.ones(1))[0] == pytest.approx(3 + 0.5 + 3 + 2.5)
    x0 = np.array([[0.0, 0.4, 0.0, 0.0]])
    base = outcome_model(ScenarioConfig(scenario=3), x0, np.ones(1))[0]
    pop = outcome_model(ScenarioConfig(scenario=3, beta_s=1.0), x0, np.zeros(1))[0]
    assert pop - base == pytest.approx(0.5)
    exp = outcome_model(ScenarioConfig(scenario=4, beta_s=5.0), row, np.ones(1))[0]
    assert exp == outcome_model(ScenarioConfig(scenario=4), row, np.ones(1))[0]


def test_scenario_four_extra_term():
    row = np.array([[1.0, 2.0, 0.0, 0.0]])
    a = outcome_model(ScenarioConfig(scenario=4, beta_s=2.0), row, np.zeros(1))[0]
    b = outcome_model(ScenarioConfig(scenario=4), row, np.zeros(1))[0]
    assert a - b == pytest.approx(2.0 * (0.5 - 1.0 + 1.5 * 2.0))


def test_generate_outcomes_effect():
    cfg = ScenarioConfig(noise_sd=0.0, alpha_tau=2.0)
    draws = np.array([[0.0, 0.0, 0.0, 0.5], [0.0, 0.0, 0.0, -1.0]])
    y, y0, y1, pate = generate_outcomes(cfg, draws, np.ones(2), np.array([1.0, 0.0]), replication_rng(0, 0))
    assert pate == 2.0
    assert np.allclose(y1 - y0, [2.5, 1.0])
    assert np.allclose(y, [2.5, 0.0])


def test_config_invariants():
    with pytest.raises(ValueError):
        ScenarioConfig(n=20, N=10)
    with pytest.raises(ValueError):
        ScenarioConfig(p_treat=1.0)
    with pytest.raises(ValueError):
        ScenarioConfig(reps=0)


def test_single_rep_equals_hand_pipeline():
    cfg = ScenarioConfig(scenario=2, n=300, N=1500, reps=1, seed=5)
    r = draw_replication(cfg, 0)
    model = fit_residualizer(ResidualizerSpec("ols-interactions", compute_cv=False), r.pop)
    est = all_estimates(r.exp, r.weights, yhat=predict_experiment(model, r.exp))
    s = run_scenario(cfg)
    for m in METHODS:
        assert s.estimators[m]["bias"] == est[m].tau_hat - 1.0
        assert s.estimators[m]["se_mean"] == est[m].se


def test_summary_invariants():
    s = run_scenario(ScenarioConfig(scenario=4, beta_s=2.0, n=200, N=1000, reps=15, splits=2))
    assert s.failures == 0 and s.reps_ok == 15
    for v in s.estimators.values():
        assert 0 <= v["coverage"] <= 1
        assert v["mse"] >= v["bias"] ** 2 - 1e-15


def test_worker_count_does_not_change_summary():
    cfg = ScenarioConfig(scenario=3, beta_s=-2.0, n=200, N=1000, reps=6, splits=2)
    assert run_scenario(cfg, workers=1).to_json() == run_scenario(cfg, workers=3).to_json()


def test_true_weights_option():
    cfg = ScenarioConfig(scenario=1, n=200, N=1000, true_weights=True)
    r = draw_replication(cfg, 0)
    assert r.weights.method == "true"
    odds = 1 + np.exp(-r.xs)
    assert np.allclose(r.weights.weights, odds / odds.mean())


def test_failed_replication_recorded():
    rec = [{"rep": 0, "failed": "Infeasible: x"}] + [run_replication(ScenarioConfig(n=200, N=1000, splits=1), 1)]
    s = summarize(ScenarioConfig(n=200, N=1000), rec)
    assert s.failures == 1 and s.reps_ok == 1
    json.loads(s.to_json())


def test_confusion_rates():
    assert diagnostic_confusion([True, False, True], [True, False, True]) == {
        "tp": 2, "pos": 2, "tn": 1, "neg": 1, "tpr": 1.0, "tnr": 1.0}
    c = diagnostic_confusion([True, True], [True, True])
    assert c["tnr"] is None and c["tpr"] == 1.0
    assert diagnostic_confusion([False, True, False, False], [True, True, False, False])["tpr"] == 0.5
