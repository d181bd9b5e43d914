import numpy as np
import pytest

from tlrda import spectral as sp
from tlrda.errors import ContractError, UnsupportedRegimeError
from tlrda.hyper import HyperParams
from tlrda.sample import compute_moments
from tlrda.simgen import SimConfig, simulate
from tlrda.weights import (PluginContext, WeightProblem, build_problem, finite_sample_oracle_weights,
                           fit_transfer, homogeneous_closed_form, plugin_problem, solve_weights,
                           theory_problem)


def identity_problem(variant, K=3, g=1.0, lam=1.0, rho=0.5, a2=0.5):
    hp = HyperParams.equicorrelated([a2] * K, rho)
    return theory_problem(variant, hp, np.ones(10), [g] * K, lam)


def test_single_population_scalar():
    for v in ("E_ind", "P_ind", "E_pool", "P_pool"):
        pr = identity_problem(v, K=1)
        w = solve_weights(pr).w
        assert w[0] == pytest.approx(pr.u[0] / pr.system[0, 0], rel=1e-12)


def test_prediction_problem_entries_identity():
    # limits for Sigma = I, gamma = 1, lambda = 1 written out from the MP values
    s = sp.mp_summary(1.0, 1.0)
    m, v, vp = s.m, s.v, s.v_prime
    pr = identity_problem("P_ind", K=2, rho=0.5, a2=0.5)
    assert pr.u[-1] == pytest.approx(0.5 * m)
    assert pr.A[0, 0] == pytest.approx(0.5 * (v - vp) / v**2)
    assert pr.A[0, 1] == pytest.approx(0.5 * 0.5 * m * m)
    assert pr.R[0, 0] == pytest.approx((vp - v * v) / v**4)


def test_uninformative_sources_get_zero_weight():
    K = 4
    hp = HyperParams([0.5] * K, np.eye(K))
    for v in ("E_ind", "P_ind", "E_pool", "P_pool"):
        w = solve_weights(theory_problem(v, hp, np.ones(10), [0.5, 1.0, 2.0, 1.0], 1.0)).w
        assert np.all(w[:-1] == 0) and w[-1] > 0


def test_solve_identity_system():
    pr = WeightProblem("P_ind", np.array([0.0, 0.0, 1.0]), np.zeros((3, 3)), np.eye(3))
    tw = solve_weights(pr)
    np.testing.assert_allclose(tw.w, [0, 0, 1])
    assert tw.solver_residual < 1e-14 and tw.condition_estimate == pytest.approx(1.0)


def test_rho_zero_homogeneous_scalar_arithmetic():
    s = sp.mp_summary(1.0, 1.0)
    te, tp = (s.v - s.v_prime) / s.v**2, (s.v_prime - s.v**2) / s.v**4
    pr = identity_problem("P_ind", K=3, rho=0.0)
    w = solve_weights(pr).w
    np.testing.assert_allclose(w, [0, 0, np.sqrt(0.5) ** 2 * s.m / (0.5 * te + tp)], rtol=1e-12)


def test_build_problem_contracts():
    hp = HyperParams.equicorrelated([0.5] * 2, 0.3)
    s1, s2 = sp.mp_summary(1.0, 1.0), sp.mp_summary(1.0, 2.0)
    with pytest.raises(ContractError):
        build_problem("P_pool", hp, [s1, s2])
    with pytest.raises(ContractError):
        build_problem("E_ind", hp, [s1, s1], np.zeros((2, 2)))
    with pytest.raises(ContractError):
        build_problem("X_ind", hp, [s1, s1])
    with pytest.raises(ContractError):
        theory_problem("P_het", hp, np.ones(3), [1, 1], 1.0)


def test_homogeneous_closed_form_examples():
    s = sp.mp_summary(1.0, 1.0)
    w0 = homogeneous_closed_form("P", 4, s, 0.0, 0.5, s.m**2).w
    assert np.all(w0[:-1] == 0)
    w1 = homogeneous_closed_form("P", 4, s, 1.0, 0.5, s.m**2).w
    np.testing.assert_allclose(w1, w1[0], rtol=1e-12)
    for kind in "EP":
        pr = identity_problem(kind + "_ind", K=6, rho=0.5, a2=0.5)
        cf = homogeneous_closed_form(kind, 6, s, 0.5, 0.5, s.m**2, 1.0).w
        np.testing.assert_allclose(cf, solve_weights(pr).w, atol=1e-10)
    with pytest.raises(ContractError):
        homogeneous_closed_form("E", 3, s, 0.5, 0.5, s.m**2)


def test_positive_target_weight_on_grid():
    for g in (0.5, 1.0, 2.0):
        for lam in (0.3, 1.0, 5.0):
            for rho in (0.0, 0.3, 0.9):
                for v in ("E_ind", "P_ind"):
                    assert solve_weights(identity_problem(v, K=4, g=g, lam=lam, rho=rho)).w[-1] > 0


def test_oracle_weights_trivial():
    rng = np.random.default_rng(0)
    p = 6
    D = np.vstack([np.eye(p)[0], np.eye(p)[1]])
    deltas = np.vstack([np.zeros(p), np.eye(p)[2]])
    np.testing.assert_allclose(finite_sample_oracle_weights("P", deltas, np.eye(p), D), 0)
    d = rng.standard_normal(p)
    dk = rng.standard_normal(p)
    w = finite_sample_oracle_weights("P", dk[None], np.eye(p), d[None])
    assert w[0] == pytest.approx(d @ dk / (d @ d))
    with pytest.raises(ContractError):
        finite_sample_oracle_weights("P", None, np.eye(p), D)


def _ctx(seed=0, n=(120, 100, 90), p=40):
    dr = simulate(SimConfig(p=p, n=list(n), alpha_sq=1.0, rho=0.6, n_test=500, seed=seed))
    return dr, PluginContext([compute_moments(s) for s in dr.train])


def test_plugin_problems_all_variants():
    dr, ctx = _ctx()
    hp = HyperParams.equicorrelated([1.0] * 3, 0.6)
    for v in ("E_ind", "P_ind", "E_pool", "P_pool", "E_het", "P_het"):
        pr = plugin_problem(v, hp, ctx, 1.0)
        assert np.linalg.eigvalsh(pr.system).min() > 0
        assert np.allclose(pr.A, pr.A.T, atol=1e-12)
        tw = solve_weights(pr)
        assert tw.solver_residual < 1e-10 * max(np.linalg.norm(pr.u), 1e-300)


def test_plugin_tracks_theory():
    # at moderate size the plug-in weights sit close to the limiting weights
    dr, ctx = _ctx(n=(1200, 1000, 800), p=400)
    hp = HyperParams.equicorrelated([1.0] * 3, 0.6)
    H = np.linalg.eigvalsh(np.array([[0.5 ** abs(i - j) for j in range(400)] for i in range(400)]))
    for v in ("P_ind", "E_ind", "P_pool"):
        a = solve_weights(plugin_problem(v, hp, ctx, 1.0)).w
        b = solve_weights(theory_problem(v, hp, H, ctx.gammas, 1.0)).w
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 0.05


def test_estimation_variant_needs_invertible_pooled():
    dr, ctx = _ctx(n=(20, 15, 12), p=60)
    hp = HyperParams.equicorrelated([1.0] * 3, 0.6)
    with pytest.raises(UnsupportedRegimeError):
        plugin_problem("E_pool", hp, ctx, 1.0)
    plugin_problem("P_pool", hp, ctx, 1.0)


def test_fit_transfer_zero_signal_falls_back(caplog):
    dr, ctx = _ctx()
    hp = HyperParams([1.0, 1.0, 0.0], np.eye(3))
    with caplog.at_level("WARNING"):
        fit = fit_transfer("P_ind", hp, ctx, 1.0)
    np.testing.assert_allclose(fit.weights.w, [0, 0, 1])
    assert "zero" in caplog.text
