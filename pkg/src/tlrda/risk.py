"""Limiting and empirical classification error, diagnostics and experiments."""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from . import spectral as sp
from .errors import ContractError, UnsupportedRegimeError
from .hyper import HyperParams, estimate_hyper
from .sample import DiscriminantDirection, PopulationSample, compute_moments
from .simgen import SimConfig, covariance, draw_deltas, draw_population, replicate_config
from .weights import (PluginContext, build_problem, family, fit_transfer, prediction_variant,
                      solve_weights, theory_problem)

log = logging.getLogger(__name__)

Phi = ndtr
Phi_inv = ndtri


def _canon(w, u):
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        raise ContractError("error undefined for w = 0")
    return -w if u @ w < 0 else w


def theta(w, u, A_err) -> float:
    """u'w / sqrt(w'Aw) after canonicalizing u'w >= 0."""
    u = np.asarray(u, float)
    w = _canon(w, u)
    q = float(w @ np.asarray(A_err, float) @ w)
    if q <= 0:
        raise ContractError("w'Aw must be positive")
    return float(u @ w) / np.sqrt(q)


def limiting_error(w, u, A_err) -> float:
    return float(Phi(-theta(w, u, A_err)))


def optimal_error(u, A_err) -> float:
    u = np.asarray(u, float)
    return float(Phi(-np.sqrt(u @ np.linalg.solve(A_err, u))))


def bayes_error(alpha_K_sq: float, mean_inv_T: Optional[float] = 1.0) -> float:
    if mean_inv_T is None:
        raise UnsupportedRegimeError("Bayes error needs E(1/T), unavailable in this regime")
    return float(Phi(-np.sqrt(alpha_K_sq * mean_inv_T)))


@dataclass
class RiskReport:
    limiting_error: float
    bayes_error: Optional[float]
    theta_w: float
    theta_bayes: Optional[float]
    cos_theta: Optional[float]
    empirical_error: Optional[float] = None
    auc: Optional[float] = None

    def to_dict(self):
        return asdict(self)


def risk_report(w, u, A_err, alpha_K_sq: float, mean_inv_T: Optional[float] = 1.0,
                empirical: Optional[dict] = None) -> RiskReport:
    th = theta(w, u, A_err)
    err = float(Phi(-th))
    if mean_inv_T is None or alpha_K_sq <= 0:
        be = tb = ct = None
    else:
        tb = float(np.sqrt(alpha_K_sq * mean_inv_T))
        be = float(Phi(-tb))
        ct = th / tb
    emp = empirical or {}
    return RiskReport(err, be, th, tb, ct, emp.get("error"), emp.get("auc"))


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    labels = np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ContractError("AUC undefined for a single-class test set")
    r = rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def empirical_error_and_auc(direction, intercept: Optional[float], test: PopulationSample) -> dict:
    if isinstance(direction, DiscriminantDirection):
        b = direction.intercept if intercept is None else intercept
        d = direction.direction
    else:
        d, b = np.asarray(direction, float), float(intercept or 0.0)
    if test.n == 0:
        raise ContractError("empty test set")
    s = test.features @ d + b
    pred = np.where(s >= 0, 1, -1)
    out = {"error": float(np.mean(pred != test.labels)), "auc": None}
    try:
        out["auc"] = auc_score(s, test.labels)
    except ContractError as e:
        out["auc_error"] = str(e)
    return out


# ---------------------------------------------------------------- unequal class sizes

def intercept_limit(summary: sp.SpectralSummary, gamma_plus: float, gamma_minus: float) -> float:
    """Limit of the target intercept under unequal class sizes."""
    return (gamma_minus - gamma_plus) / (4 * summary.gamma) * (1.0 / (summary.lam * summary.v) - 1.0)


def unbalanced_limiting_error(w, u, A, R, gammas, gamma_plus, gamma_minus, pi_plus: float,
                              target_summary: sp.SpectralSummary) -> float:
    """Two-class error with a non-vanishing intercept and class-size-scaled noise.

    A, R are the prediction-problem matrices (their sum is the balanced error
    matrix); gamma_plus / gamma_minus hold p/n_{k,+} and p/n_{k,-}.
    """
    gammas = np.asarray(gammas, float)
    gp = np.asarray(gamma_plus, float)
    gm = np.asarray(gamma_minus, float)
    if np.any(np.abs(1 / gp + 1 / gm - 1 / gammas) > 1e-9 / gammas.min()):
        raise ContractError("class aspect ratios inconsistent with 1/gamma = 1/gamma+ + 1/gamma-")
    if not 0 <= pi_plus <= 1:
        raise ContractError("pi_plus must lie in [0, 1]")
    u = np.asarray(u, float)
    w = _canon(w, u)
    S = np.asarray(A, float) + np.diag(np.diag(R) * (gp + gm) / (4 * gammas))
    sd = np.sqrt(w @ S @ w)
    b = intercept_limit(target_summary, gp[-1], gm[-1])
    uw = float(u @ w)
    return float((1 - pi_plus) * Phi((-uw + b) / sd) + pi_plus * Phi(-(uw + b) / sd))


def numeric_weight_search_unbalanced(objective: Callable, K: int, init, starts=(),
                                     budget: int = 10_000, restarts: int = 3, seed: int = 0):
    """Coordinate pattern search with shrinking step; returns (best_w, best_f, trace)."""
    if K > 8:
        raise ContractError("search is limited to K <= 8")
    rng = np.random.default_rng(seed)
    cands = [np.asarray(init, float)] + [np.asarray(s, float) for s in starts]
    best_w, best_f = None, np.inf
    trace = []
    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        try:
            return float(objective(x))
        except (ContractError, FloatingPointError):
            return np.inf

    for r in range(max(restarts, len(cands))):
        if r < len(cands):
            x = cands[r].copy()
        else:
            x = best_w * (1 + 0.1 * rng.standard_normal(K))
        fx = f(x)
        step = 0.25 * max(np.linalg.norm(x), 1e-3)
        while step > 1e-9 * max(np.linalg.norm(x), 1.0) and evals < budget:
            improved = False
            for j in range(K):
                for sgn in (1.0, -1.0):
                    y = x.copy()
                    y[j] += sgn * step
                    fy = f(y)
                    if fy < fx:
                        x, fx, improved = y, fy, True
                        break
            if not improved:
                step *= 0.5
            trace.append(fx)
        if fx < best_f:
            best_w, best_f = x, fx
    return best_w, best_f, trace


# ---------------------------------------------------------------- pooled vs individual

def _crossover_errors(K, g, lam, lam_p, rho, a2):
    hp = HyperParams.equicorrelated(a2, rho)
    s = sp.mp_summary(g, lam)
    cross = np.full((K, K), s.m * s.m)
    pi = build_problem("P_ind", hp, [s] * K, cross, gammas=[g] * K)
    sp_ = sp.mp_summary(g / K, lam_p)
    pp = build_problem("P_pool", hp, [sp_] * K, None, gammas=[g] * K)
    return optimal_error(pi.u, pi.system), optimal_error(pp.u, pp.system)


def crossover_condition(form: str, K, g, r, rp, rho, a2) -> bool:
    """Closed-form 'pooled wins' condition at the crossover regularization levels.

    form 'simplified' is the commonly quoted sufficient-style inequality
    (rho=0: gamma[(1+r')^2 - (1+r)^2] >= K-1); 'exact' is algebraically
    equivalent to comparing the two optimal limiting errors.
    """
    a2 = np.broadcast_to(np.asarray(a2, float), (K,))
    if form == "simplified":
        if rho == 0:
            return bool(g * ((1 + rp) ** 2 - (1 + r) ** 2) >= K - 1)
        return bool(g**2 * ((1 + rp) ** 2 - K * (1 + r) ** 2) >= K * (g * (1 + r) ** 2 - 1) * a2.sum())
    if form != "exact":
        raise ContractError("form must be 'simplified' or 'exact'")
    if rho == 0:
        return bool((1 + rp) ** 2 >= K * (1 + r) ** 2)
    dlt = 1.0 / (g * (1 + r) ** 2 - 1)
    S = np.sum(a2 / (dlt * a2 + (1 + dlt) * g))
    s = a2.sum() / g
    cP = (g * (1 + rp) ** 2 - K) / (g * (1 + rp) ** 2)
    return bool(cP * s / (1 + s) >= S / (1 + S))


def crossover_analysis(K: int, gammas, r: float, rp: float, rho: float, alpha_sq, tol=1e-9) -> dict:
    if rho not in (0, 1):
        raise ContractError("closed-form crossover needs rho in {0, 1}")
    gammas = np.asarray(gammas, float)
    a2 = np.broadcast_to(np.asarray(alpha_sq, float), (K,))
    rows = []
    for g in gammas:
        if not (r > max(1 - g, 0) / g and rp > max(K - g, 0) / g):
            raise ContractError("r=%g, r'=%g violate the preconditions at gamma=%g" % (r, rp, g))
        lam = r * (g - 1 / (r + 1))
        lam_p = rp * (g / K - 1 / (rp + 1))
        ei, ep = _crossover_errors(K, g, lam, lam_p, rho, a2)
        rows.append({"gamma": float(g), "lambda": lam, "lambda_pooled": lam_p,
                     "err_individual": ei, "err_pooled": ep,
                     "pooled_wins": bool(ep <= ei), "decisive": bool(abs(ep - ei) > tol),
                     "condition_simplified": crossover_condition("simplified", K, g, r, rp, rho, a2),
                     "condition_exact": crossover_condition("exact", K, g, r, rp, rho, a2)})

    def first(key):
        hits = [row["gamma"] for row in rows if row[key]]
        return min(hits) if hits else None

    return {"rows": rows, "condition_holds": [row["condition_simplified"] for row in rows],
            "gamma_star": first("pooled_wins"), "gamma_star_simplified": first("condition_simplified"),
            "gamma_star_exact": first("condition_exact")}


def crossover_sweep(K, gammas, alpha_sq, rho, H, lam_grid) -> list:
    """Best-over-lambda optimal limiting error, individual vs pooled, for spectrum H.

    Every population shares H and the aspect ratio gamma.
    """
    hp = HyperParams.equicorrelated(np.broadcast_to(np.asarray(alpha_sq, float), (K,)), rho)
    t = sp._h_eigs(H)
    out = []
    for g in gammas:
        gk = np.full(K, float(g))
        best = {}
        for fam in ("ind", "pool"):
            errs = []
            for lam in lam_grid:
                pr = theory_problem("P_" + fam, hp, t, gk, lam)
                errs.append(optimal_error(pr.u, pr.system))
            best[fam] = min(errs)
        out.append({"gamma": float(g), "err_individual": best["ind"], "err_pooled": best["pool"]})
    return out


# ---------------------------------------------------------------- theory vs Monte Carlo

def true_hyper(config: SimConfig) -> HyperParams:
    return HyperParams(config.alpha_sq.copy(), config.rho.copy(), "user_supplied")


def class_gammas(config: SimConfig):
    """p/n, p/n_+, p/n_- per population under stratified sampling."""
    n = np.asarray(config.n, float)
    n_plus = np.array([min(max(int(round(pi * nk)), 1), int(nk) - 1)
                       for pi, nk in zip(config.class_balance, config.n)], float)
    p = config.p
    return p / n, p / n_plus, p / (n - n_plus)


def theory_error(variant: str, config: SimConfig, lam: float, w=None) -> dict:
    """Limiting weights of variant and the limiting error of the resulting classifier."""
    t = np.linalg.eigvalsh(covariance(config.cov, config.p))
    hp = true_hyper(config)
    g, gp, gm = class_gammas(config)
    prob = theory_problem(variant, hp, t, g, lam)
    if w is None:
        w = solve_weights(prob).w
    pp = prob if variant.startswith("P") else theory_problem(prediction_variant(variant), hp, t, g, lam)
    pi_plus = float(config.class_balance[-1])
    if not np.any(w) or not np.any(pp.u):
        return {"w": w, "error": 0.5}
    if np.allclose(gp, gm):
        err = limiting_error(w, pp.u, pp.system)
    else:
        gbar = 1 / np.sum(1 / g)
        tgt = sp.population_summary(t, gbar if family(variant) == "pool" else g[-1], lam)
        err = unbalanced_limiting_error(w, pp.u, pp.A, pp.R, g, gp, gm, pi_plus, tgt)
    return {"w": w, "error": err}


def _mc_rep(config: SimConfig, variants, lam_grid, hyper_source, test_cov=None):
    deltas = draw_deltas(config)
    train = [draw_population(config, k, deltas) for k in range(1, config.K + 1)]
    test = draw_population(config, config.K, deltas, test=True)
    mos = [compute_moments(s) for s in train]
    hp = true_hyper(config) if hyper_source == "true" else estimate_hyper(mos)
    ctx = PluginContext(mos)
    minv = {}
    out = {}
    for lam in lam_grid:
        for v in variants:
            if v == "naive":
                d = ctx.directions(lam)[-1]
                out[(lam, v)] = empirical_error_and_auc(d, None, test)["error"]
                continue
            fam = family(v)
            if v.startswith("E") and fam not in minv:
                minv[fam] = ctx.target_mean_inv_T() if fam == "het" else ctx.pooled_mean_inv_T()
            fit = fit_transfer(v, hp, ctx, lam, minv.get(fam))
            out[(lam, v)] = empirical_error_and_auc(fit.classifier, None, test)["error"]
    return out


def theory_vs_mc(config: SimConfig, lam_grid, reps: int, variants=("E_ind", "P_ind", "E_pool", "P_pool"),
                 hyper_source: str = "estimated", theory=True) -> list:
    """Rows (lambda, method, error_theory, error_mc_mean, error_mc_sd, n_reps, seed0)."""
    lam_grid = [float(l) for l in lam_grid]
    mc = {key: [] for key in ((l, v) for l in lam_grid for v in variants)}
    for rep in range(reps):
        res = _mc_rep(replicate_config(config, rep), variants, lam_grid, hyper_source)
        for key, val in res.items():
            mc[key].append(val)
    rows = []
    for l in lam_grid:
        for v in variants:
            vals = np.asarray(mc[(l, v)])
            et = np.nan
            if theory and v != "naive":
                et = theory_error(v, config, l)["error"]
            rows.append({"lambda": l, "method": v, "error_theory": et,
                         "error_mc_mean": float(vals.mean()),
                         "error_mc_sd": float(vals.std(ddof=1)) if vals.size > 1 else np.nan,
                         "n_reps": int(vals.size), "seed0": int(config.seed)})
    return rows


def robustness_config(seed=0, **over) -> SimConfig:
    """Ten populations, p=150, n=250..160, rho=0.5; target test eigenvalues cubed (faster decay)."""
    from .simgen import CovSpec
    base = dict(p=150, n=list(range(250, 159, -10)), alpha_sq=0.5, rho=0.5,
                cov=CovSpec("ar1", 0.5), test_cov=CovSpec("ar1", 0.5, power=3.0),
                n_test=2000, seed=seed, stratified=True)
    base.update(over)
    return SimConfig(**base)


def robustness_experiment(config: SimConfig, lam_grid, seeds: Sequence[int],
                          variants=("naive", "E_ind", "P_ind")) -> list:
    """Empirical error per (lambda, method) over seeds; rows share the experiment CSV schema."""
    lam_grid = [float(l) for l in lam_grid]
    acc = {(l, v): [] for l in lam_grid for v in variants}
    for s in seeds:
        cfg = SimConfig(**{**config.to_dict(), "seed": int(s)})
        res = _mc_rep(cfg, variants, lam_grid, "estimated")
        for key, val in res.items():
            acc[key].append(val)
    rows = []
    for l in lam_grid:
        for v in variants:
            vals = np.asarray(acc[(l, v)])
            rows.append({"lambda": l, "method": v, "error_theory": np.nan,
                         "error_mc_mean": float(vals.mean()),
                         "error_mc_sd": float(vals.std(ddof=1)) if vals.size > 1 else np.nan,
                         "n_reps": int(vals.size), "seed0": int(seeds[0]) if len(seeds) else 0,
                         "per_seed": vals.tolist()})
    return rows
