import json
import os

import numpy as np
import pytest

from tlrda import cli
from tlrda.sample import compute_moments
from tlrda.simgen import SimConfig, simulate

SIM = {"p": 12, "n": [60, 50, 40], "alpha_sq": 1.0, "rho": 0.6, "cov": "ar1", "n_test": 300, "seed": 4}


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh)
    return str(path)


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    cli.cmd_simulate({"sim": SIM}, str(out))
    return out


def test_simulate_outputs_and_round_trip(dataset):
    man = json.load(open(dataset / "manifest.json"))
    assert man["target"] == 3 and man["test"] == "test.csv"
    train, test, _ = cli.load_manifest(str(dataset / "manifest.json"))
    mem = simulate(SimConfig(**SIM))
    assert [s.n for s in train] == [60, 50, 40] and test.n == 300
    for a, b in zip(train, mem.train):
        ma, mb = compute_moments(a), compute_moments(b)
        np.testing.assert_allclose(ma.delta_hat, mb.delta_hat, rtol=0, atol=1e-12)
        np.testing.assert_allclose(ma.sigma_hat, mb.sigma_hat, rtol=0, atol=1e-12)


def test_simulate_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        cli.cmd_simulate({"sim": SIM}, str(tmp_path / d))
    for f in ("pop_1.csv", "pop_3.csv", "test.csv", "manifest.json", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_without_test(tmp_path):
    man = cli.cmd_simulate({"sim": {**SIM, "n_test": 0}}, str(tmp_path))
    assert man["test"] is None and "test_note" in man
    assert not os.path.exists(tmp_path / "test.csv")


def test_fit_report_and_cv_selection(dataset, tmp_path):
    cfg = {"manifest": str(dataset / "manifest.json"), "variants": ["P_ind", "P_pool"],
           "lambda_grid": "0.3:10:6", "folds": 3}
    res = cli.cmd_fit(cfg, str(tmp_path / "fit"))
    rep = json.load(open(tmp_path / "fit" / "report.json"))
    assert rep["schema_version"] == cli.SCHEMA_VERSION
    assert set(rep) >= {"config_echo", "hyperparams", "weights", "risk"}
    grid = cli.parse_grid("0.3:10:6")
    for v in ("P_ind", "P_pool"):
        cv = res["cv"][v]
        errs = np.array(cv["mean_error"])
        assert cv["selected"] in grid
        assert cv["selected"] == grid[np.flatnonzero(errs == errs.min())[0]]
        assert 0 <= res["risk"][v]["empirical_error"] <= 1
    assert rep["hyperparams"]["provenance"] == "estimated"
    # a second run reproduces the report exactly
    cli.cmd_fit(cfg, str(tmp_path / "fit2"))
    assert (tmp_path / "fit" / "report.json").read_bytes() == (tmp_path / "fit2" / "report.json").read_bytes()


def test_fit_user_hyper_and_single_population(tmp_path):
    cli.cmd_simulate({"sim": {**SIM, "n": [80]}}, str(tmp_path / "one"))
    hyper = {"alpha_sq": [1.0], "rho": [[1.0]]}
    res = cli.cmd_fit({"manifest": str(tmp_path / "one" / "manifest.json"), "hyper": hyper,
                       "lambda_grid": "0.5:2:3", "folds": 2}, str(tmp_path / "o"))
    assert res["hyperparams"]["provenance"] == "user_supplied"
    assert len(res["weights"]["P_ind"]["w"]) == 1
    assert "note" in res["weights"]["P_ind"]


def test_cv_tie_goes_to_smaller_lambda(monkeypatch, dataset, tmp_path):
    monkeypatch.setattr(cli, "_cv_errors", lambda *a, **k: np.array([0.3, 0.2, 0.2, 0.4]))
    res = cli.cmd_fit({"manifest": str(dataset / "manifest.json"), "lambda_grid": [0.5, 1.0, 2.0, 4.0]},
                      str(tmp_path))
    assert res["cv"]["P_ind"]["selected"] == 1.0


def test_validate_single_replicate(tmp_path):
    rows = cli.cmd_validate({"sim": {**SIM, "n_test": 200}, "reps": 1, "lambda_grid": [1.0],
                             "variants": ["P_ind"]}, str(tmp_path))
    assert np.isnan(rows[0]["error_mc_sd"])
    text = (tmp_path / "validate.csv").read_text().splitlines()
    assert text[0] == ",".join(cli.EXPERIMENT_COLUMNS) and "NaN" in text[1]


def test_validate_null_signal(tmp_path):
    rows = cli.cmd_validate({"sim": {**SIM, "alpha_sq": 0.0, "rho": 0.0, "n_test": 1000}, "reps": 3,
                             "lambda_grid": [1.0], "variants": ["P_ind", "P_pool"]}, str(tmp_path))
    for r in rows:
        assert r["error_theory"] == 0.5 and abs(r["error_mc_mean"] - 0.5) < 0.06


def test_crossover_and_robustness(tmp_path):
    rows = cli.cmd_crossover({"K": [2], "gammas": "0.5:8:5", "r": 1.5, "r_prime": 3.75, "rho": 0},
                             str(tmp_path / "c"))
    assert len(rows) == 5 and (tmp_path / "c" / "crossover.csv").exists()
    rows = cli.cmd_robustness({"sim": {"p": 20, "n": [60, 50, 40]}, "seeds": 2, "lambda_grid": [1.0]},
                              str(tmp_path / "r"))
    assert {r["method"] for r in rows} == {"naive", "E_ind", "P_ind"}


def test_exit_codes(tmp_path, dataset):
    bad = write_json(tmp_path / "bad.json", {"sim": SIM, "extra": 1})
    assert cli.run(["simulate", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    pool_pp = write_json(tmp_path / "pp.json", {"manifest": str(dataset / "manifest.json"),
                                                "variants": ["P_pool"], "lambdas_per_population": [1, 1, 1]})
    assert cli.run(["fit", "--config", pool_pp, "--out", str(tmp_path / "y")]) == 2
    (tmp_path / "one.csv").write_text("f1,label\n1.0,1\n2.0,1\n3.0,1\n")
    man = write_json(tmp_path / "m.json", {"populations": {"1": "one.csv"}, "target": 1})
    single = write_json(tmp_path / "s.json", {"manifest": man})
    assert cli.run(["fit", "--config", single, "--out", str(tmp_path / "z")]) == 3
    (tmp_path / "hdr.csv").write_text("a,b\n1,1\n")
    man2 = write_json(tmp_path / "m2.json", {"populations": {"1": "hdr.csv"}, "target": 1})
    assert cli.run(["fit", "--config", write_json(tmp_path / "s2.json", {"manifest": man2}),
                    "--out", str(tmp_path)]) == 3
    good = write_json(tmp_path / "good.json", {"sim": SIM})
    assert cli.run(["simulate", "--config", good, "--out", str(tmp_path / "ok"), "--seed", "3"]) == 0
    assert json.load(open(tmp_path / "ok" / "report.json"))["config_echo"]["sim"]["seed"] == 3


def test_parse_grid():
    g = cli.parse_grid(None)
    assert len(g) == 30 and g[0] == pytest.approx(0.3) and g[-1] == pytest.approx(10)
    with pytest.raises(cli.ContractError):
        cli.parse_grid("1:2")
    with pytest.raises(cli.ContractError):
        cli.parse_grid("-1:2:3")


def test_fit_benchmark_prediction_matches_holdout(tmp_path):
    # single datasets scatter (estimated alpha^2 and rho are noisy at p = 150); the average agrees
    pred, emp = [], []
    for seed in range(6):
        sim = {"p": 150, "n": [150, 140, 130, 120, 110, 100], "alpha_sq": 0.5, "rho": 0.5,
               "cov": "ar1", "n_test": 2000, "seed": seed}
        d = tmp_path / str(seed)
        cli.cmd_simulate({"sim": sim}, str(d / "d"))
        r = cli.cmd_fit({"manifest": str(d / "d" / "manifest.json"), "lambda_grid": "0.3:10:8"},
                        str(d / "f"))["risk"]["P_ind"]
        pred.append(r["limiting_error"])
        emp.append(r["empirical_error"])
    assert abs(np.mean(pred) - np.mean(emp)) < 0.02


def test_feature_filter(dataset, tmp_path):
    train, _, _ = cli.load_manifest(str(dataset / "manifest.json"))
    for kind in ("variance", "t"):
        sel = cli.select_features(train, kind, 5)
        assert len(sel) == 5 and np.all(np.diff(sel) > 0)
    # a single strongly separated feature is always kept by the t filter
    X = train[-1].features.copy()
    X[:, 7] += 10 * train[-1].labels
    boosted = train[:-1] + [type(train[-1])(X, train[-1].labels, train[-1].population_id)]
    assert 7 in cli.select_features(boosted, "t", 1)
    res = cli.cmd_fit({"manifest": str(dataset / "manifest.json"), "lambda_grid": [1.0], "folds": 2,
                       "feature_filter": {"kind": "variance", "top_m": 4}}, str(tmp_path))
    assert len(res["selected_features"]) == 4 and min(res["selected_features"]) >= 1
    with pytest.raises(cli.ContractError):
        cli.select_features(train, "t", 99)
