import numpy as np
import pytest
from scipy import stats

from tlrda import spectral as sp
from tlrda.errors import ContractError
from tlrda.risk import empirical_error_and_auc
from tlrda.sample import compute_moments, discriminant_direction
from tlrda.simgen import (CovSpec, SimConfig, benchmark_config, covariance, draw_deltas, replicate_config,
                          simulate)


def test_config_validation():
    with pytest.raises(ContractError):
        SimConfig(p=10, n=[20, 20], rho=np.array([[1, 2], [2, 1]]))
    with pytest.raises(ContractError):
        SimConfig(p=10, n=[20], class_balance=1.0)
    with pytest.raises(ContractError):
        SimConfig(p=10, n=[20], mu_bar_scale=100.0)
    with pytest.raises(ContractError):
        CovSpec("ar1", 1.5)
    with pytest.raises(ContractError):
        SimConfig(p=0, n=[20])


def test_covariances():
    S = covariance(CovSpec("ar1", 0.5), 5)
    assert S[0, 3] == pytest.approx(0.125)
    np.testing.assert_allclose(np.diag(S), 1.0)
    S3 = CovSpec("ar1", 0.5, power=3.0).matrix(50)
    assert np.trace(S3) / 50 == pytest.approx(1.0)
    e1, e3 = np.linalg.eigvalsh(S), np.linalg.eigvalsh(S3)
    assert e3.max() / e3.min() > e1.max() / e1.min()
    np.testing.assert_allclose(CovSpec("custom", eigs=[1, 2, 3]).matrix(3), np.diag([1, 2, 3]))


def test_deltas_rank_one_and_concentration():
    d = draw_deltas(SimConfig(p=50, n=[10, 10, 10], alpha_sq=0.7, rho=1.0))
    np.testing.assert_allclose(d[0], d[1], atol=1e-12)
    np.testing.assert_allclose(d[1], d[2], atol=1e-12)
    p = 2000
    for s in range(10):
        cfg = SimConfig(p=p, n=[10, 10], alpha_sq=[0.5, 2.0], rho=0.0, seed=s)
        d = draw_deltas(cfg)
        for k in range(2):
            a2 = cfg.alpha_sq[k]
            assert abs(d[k] @ d[k] - a2) < 3 * np.sqrt(2 / p) * a2
        assert abs(d[0] @ d[1]) / np.sqrt(0.5 * 2.0) < 3 / np.sqrt(p)


def test_determinism_and_independence():
    cfg = SimConfig(p=20, n=[30, 25], n_test=40, seed=9)
    a, b = simulate(cfg), simulate(cfg)
    for x, y in zip(a.train + [a.test], b.train + [b.test]):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels)
    c = simulate(SimConfig(p=20, n=[30, 25], n_test=40, seed=10))
    assert not np.array_equal(a.train[0].features, c.train[0].features)
    r1, r2 = replicate_config(cfg, 1), replicate_config(cfg, 2)
    assert r1.seed != r2.seed and replicate_config(cfg, 1).seed == r1.seed


def test_class_counts():
    cfg = SimConfig(p=5, n=[1000], class_balance=0.3, stratified=False, n_test=0, seed=1)
    n_plus = int(np.sum(simulate(cfg).train[0].labels == 1))
    assert abs(n_plus - 300) < 3 * np.sqrt(1000 * 0.3 * 0.7)
    cfg = SimConfig(p=5, n=[100], class_balance=0.7, n_test=0)
    assert int(np.sum(simulate(cfg).train[0].labels == 1)) == 70


def test_null_signal_gives_chance_error():
    cfg = SimConfig(p=50, n=[200], alpha_sq=0.0, n_test=4000, seed=2)
    dr = simulate(cfg)
    mo = compute_moments(dr.train[0])
    err = empirical_error_and_auc(discriminant_direction(mo, mo.sigma_hat, 1.0), None, dr.test)["error"]
    assert abs(err - 0.5) < 0.05


def test_mp_law_ks():
    p, g = 1000, 0.5
    dr = simulate(SimConfig(p=p, n=[int(p / g)], alpha_sq=0.0, cov="identity", n_test=0, seed=3))
    ev = np.linalg.eigvalsh(compute_moments(dr.train[0]).sigma_hat)
    a, b = (1 - np.sqrt(g)) ** 2, (1 + np.sqrt(g)) ** 2
    xs = np.linspace(a, b, 4001)
    dens = np.sqrt(np.clip((b - xs) * (xs - a), 0, None)) / (2 * np.pi * g * xs)
    cdf = np.concatenate([[0], np.cumsum((dens[1:] + dens[:-1]) / 2 * np.diff(xs))])
    cdf /= cdf[-1]
    ks = stats.kstest(ev, lambda t: np.interp(t, xs, cdf)).statistic
    assert ks < 0.05


def test_benchmark_sizes():
    cfg = benchmark_config()
    dr = simulate(cfg)
    assert [s.n for s in dr.train] == [150, 140, 130, 120, 110, 100]
    assert dr.test.n == 2000 and dr.train[0].p == 150


def test_exchangeability_of_population_order():
    # swapping two populations with matched settings swaps their summary statistics in distribution
    norms = {0: [], 1: []}
    for s in range(30):
        dr = simulate(SimConfig(p=100, n=[200, 50], alpha_sq=[1.0, 0.3], rho=0.4, n_test=0, seed=s))
        drs = simulate(SimConfig(p=100, n=[50, 200], alpha_sq=[0.3, 1.0], rho=0.4, n_test=0, seed=s))
        norms[0].append(np.sum(compute_moments(dr.train[0]).delta_hat ** 2))
        norms[1].append(np.sum(compute_moments(drs.train[1]).delta_hat ** 2))
    assert stats.ks_2samp(norms[0], norms[1]).pvalue > 0.01
