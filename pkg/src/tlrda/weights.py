"""Optimal transfer weights: problem assembly, solving, closed forms and oracles.

A weight problem is the triple (u, A, R); the weights solve (A + R) w = u.
Six variants are supported:

    E_ind / P_ind    per-population covariances, estimation / prediction weights
    E_pool / P_pool  pooled covariance in every direction (common lambda)
    E_het / P_het    heterogeneous population covariances

Entries follow the limiting expressions, e.g. for P_ind

    u_k  = rho_kK a_k a_K m_k
    A_kk = a_k^2 (v - lam v') / (gamma (lam v)^2),   A_kk' = rho a a' M_kk'
    R_kk = (v' - v^2) / (lam^2 v^4)

and for E_ind

    u_k  = rho_kK a_k a_K (E(1/T) - x_k m_k) / lam_k,  x = 1 - gamma + gamma lam m
    A_kk = a_k^2 m'_k,  A_kk' = rho a a' E_kk',  R_kk = (v - lam v') / (lam v)^2
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import spectral as sp
from .errors import ContractError, NumericalError, UnsupportedRegimeError
from .hyper import HyperParams
from .sample import (CovEig, DiscriminantDirection, PopulationMoments, combine,
                     discriminant_direction, pooled_covariance, pooled_gamma)

log = logging.getLogger(__name__)

VARIANTS = ("E_ind", "P_ind", "E_pool", "P_pool", "E_het", "P_het")
COND_WARN = 1e8


def family(variant: str) -> str:
    return variant.split("_")[1]


def prediction_variant(variant: str) -> str:
    """The P variant sharing the direction family (its A + R is the error matrix)."""
    return "P_" + family(variant)


@dataclass
class WeightProblem:
    variant: str
    u: np.ndarray
    A: np.ndarray
    R: np.ndarray
    inputs_digest: dict = field(default_factory=dict, repr=False)

    @property
    def K(self) -> int:
        return self.u.size

    @property
    def system(self) -> np.ndarray:
        return self.A + self.R


@dataclass
class TransferWeights:
    w: np.ndarray
    variant: str
    solver_residual: float
    condition_estimate: float

    def to_dict(self):
        return {"variant": self.variant, "w": self.w.tolist(),
                "residual": self.solver_residual, "condition": self.condition_estimate}


def _diag_terms(s: sp.SpectralSummary):
    """(v - lam v')/(lam v)^2 and (v' - v^2)/(lam^2 v^4)."""
    lam, v, vp = s.lam, s.v, s.v_prime
    return (v - lam * vp) / (lam * v) ** 2, (vp - v * v) / (lam**2 * v**4)


def inv_trace_limit(s: sp.SpectralSummary, mean_inv_T: float) -> float:
    """Limit of tr(Sigma^-1 R)/p = (E(1/T) - x m)/lam."""
    return (mean_inv_T - s.x * s.m) / s.lam


def build_problem(variant: str, hyper: HyperParams, summaries: Sequence[sp.SpectralSummary],
                  cross=None, mean_inv_T: Optional[float] = None, gammas=None,
                  inv_traces=None) -> WeightProblem:
    """Assemble (u, A, R).

    summaries : one SpectralSummary per population; pooled variants pass the
        pooled summary (gamma = pooled aspect ratio) for every population.
    cross : K x K array of cross-trace limits or estimates.  Off-diagonal
        entries are E (E_ind), M (P_ind), U (E_het) or Y (P_het); the diagonal
        is read only by P_het for the source populations.
    gammas : per-population aspect ratios p/n_k (defaults to summary gammas).
    inv_traces : optional estimates of tr(Sigma_K^-1 R_k)/p for E variants;
        missing entries (NaN) are filled from mean_inv_T.
    """
    if variant not in VARIANTS:
        raise ContractError("unknown variant %r" % (variant,))
    K = hyper.K
    if len(summaries) != K:
        raise ContractError("need one spectral summary per population")
    kind, fam = variant.split("_")
    lams = np.array([s.lam for s in summaries])
    g = np.array([s.gamma for s in summaries]) if gammas is None else np.asarray(gammas, float)
    if g.shape != (K,):
        raise ContractError("need one aspect ratio per population")
    if fam == "pool" and not np.allclose(lams, lams[0], rtol=0, atol=1e-14):
        raise ContractError("pooled variants require a common lambda")
    if kind == "E" and mean_inv_T is None:
        raise ContractError("estimation variants need mean_inv_T")
    if fam != "pool" and K > 1 and cross is None:
        raise ContractError("cross traces required for K > 1")
    cross = np.zeros((K, K)) if cross is None else np.asarray(cross, dtype=float)

    alpha = hyper.alpha
    rho = hyper.rho
    aa = np.outer(alpha, alpha)
    u_scale = np.empty(K)
    A = np.empty((K, K))
    R = np.zeros((K, K))

    if kind == "E":
        it = np.full(K, np.nan) if inv_traces is None else np.asarray(inv_traces, float).copy()
        for k in range(K):
            if not np.isfinite(it[k]):
                it[k] = inv_trace_limit(summaries[k], mean_inv_T)
        u_scale = it
    else:
        u_scale = np.array([s.m for s in summaries])
    u = rho[:, K - 1] * alpha * alpha[K - 1] * u_scale

    if fam == "pool":
        s = summaries[0]
        gbar = s.gamma
        te, tp = _diag_terms(s)
        if kind == "E":
            A[:] = rho * aa * s.m_prime
            R[np.diag_indices(K)] = g * te / gbar
        else:
            A[:] = rho * aa * te / gbar
            R[np.diag_indices(K)] = g * tp / gbar
    else:
        A[:] = rho * aa * cross
        for k, s in enumerate(summaries):
            te, tp = _diag_terms(s)
            if kind == "E":
                A[k, k] = alpha[k] ** 2 * s.m_prime
                R[k, k] = te
            else:
                if fam == "het" and k < K - 1:
                    A[k, k] = alpha[k] ** 2 * cross[k, k]
                else:
                    A[k, k] = alpha[k] ** 2 * te / s.gamma
                R[k, k] = tp
    A = 0.5 * (A + A.T)

    digest = {"gamma": g.tolist(), "lambda": lams.tolist(), "alpha_sq": hyper.alpha_sq.tolist(),
              "rho": rho.tolist(), "summaries": [s.__dict__.copy() for s in summaries],
              "cross": cross.tolist(), "mean_inv_T": mean_inv_T}
    prob = WeightProblem(variant, u, A, R, digest)
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(R)) or not np.all(np.isfinite(u)):
        raise NumericalError("non-finite entries in weight problem")
    mineig = np.linalg.eigvalsh(prob.system).min()
    if mineig <= 0:
        raise NumericalError("A + R is not positive definite (min eigenvalue %.3g)" % mineig,
                             residual=mineig)
    return prob


def solve_weights(problem: WeightProblem) -> TransferWeights:
    M = problem.system
    try:
        w = cho_solve(cho_factor(M, lower=True), problem.u)
    except np.linalg.LinAlgError as e:
        ev = np.linalg.eigvalsh(M)
        raise NumericalError("weight system solve failed; eigenvalue range [%.3g, %.3g]"
                             % (ev.min(), ev.max())) from e
    ev = np.linalg.eigvalsh(M)
    cond = float(ev.max() / ev.min())
    if cond > COND_WARN:
        log.warning("weight system is ill-conditioned (condition %.3g)", cond)
    res = float(np.linalg.norm(M @ w - problem.u))
    return TransferWeights(w, problem.variant, res, cond)


def homogeneous_closed_form(variant: str, K: int, summary: sp.SpectralSummary, rho: float,
                            alpha_sq, cross_value: float,
                            mean_inv_T: Optional[float] = None) -> TransferWeights:
    """Rank-one-update solution for equal gamma, lambda and equicorrelation rho.

    cross_value is the common E (variant 'E') or M (variant 'P') cross trace.
    """
    a2 = np.broadcast_to(np.asarray(alpha_sq, float), (K,)).astype(float)
    alpha = np.sqrt(a2)
    te, tp = _diag_terms(summary)
    if variant == "E":
        if mean_inv_T is None:
            raise ContractError("variant E needs mean_inv_T")
        c = inv_trace_limit(summary, mean_inv_T)
        t = summary.m_prime - rho * cross_value
        tv = te
    elif variant == "P":
        c = summary.m
        t = te / summary.gamma - rho * cross_value
        tv = tp
    else:
        raise ContractError("variant must be 'E' or 'P'")
    den = t * a2 + tv
    if np.any(den <= 0):
        raise NumericalError("non-positive denominator in closed form")
    ind = np.zeros(K)
    ind[-1] = 1.0
    corr = rho + (1.0 - rho) * ind
    re = rho * cross_value
    xi = re * np.sum(a2 * corr / den) / (1.0 + re * np.sum(a2 / den))
    w = c * alpha[-1] * alpha / den * (corr - xi)
    return TransferWeights(w, variant + "_closed", 0.0, float("nan"))


def finite_sample_oracle_weights(variant: str, deltas, Sigma, directions) -> np.ndarray:
    """Exact finite-p weights given true class offsets and covariance (simulation only).

    deltas, directions : K x p arrays (rows delta_k and d_hat_k).
    E: minimizes ||Sigma^-1 delta_K - D w||^2.  P: minimizes the Sigma-weighted version.
    """
    if deltas is None or Sigma is None:
        raise ContractError("oracle weights need the true deltas and covariance")
    D = np.atleast_2d(np.asarray(directions, float)).T
    dK = np.atleast_2d(np.asarray(deltas, float))[-1]
    S = np.asarray(Sigma, float)
    if variant.startswith("E"):
        dB = np.linalg.solve(S, dK)
        G = D.T @ D
        u = D.T @ dB
    elif variant.startswith("P"):
        G = D.T @ S @ D
        u = D.T @ dK
    else:
        raise ContractError("variant must be 'E' or 'P'")
    return np.linalg.solve(G, u)


# ---------------------------------------------------------------- population-level inputs

def theory_problem(variant: str, hyper: HyperParams, H, gammas, lams) -> WeightProblem:
    """Limiting weight problem from the population spectrum H (homogeneous covariance)."""
    kind, fam = variant.split("_")
    if fam == "het":
        raise ContractError("limiting inputs are provided for a shared covariance only")
    t = sp._h_eigs(H)
    K = hyper.K
    gammas = np.asarray(gammas, float)
    lams = np.broadcast_to(np.asarray(lams, float), (K,))
    Einv = sp.mean_inv_T(t) if kind == "E" else None
    if fam == "pool":
        gbar = 1.0 / np.sum(1.0 / gammas)
        s = sp.population_summary(t, gbar, float(lams[0]))
        return build_problem(variant, hyper, [s] * K, None, Einv, gammas)
    sums = [sp.population_summary(t, g, l) for g, l in zip(gammas, lams)]
    cross = np.zeros((K, K))
    ck = "E" if kind == "E" else "M"
    for i in range(K):
        for j in range(i + 1, K):
            cross[i, j] = cross[j, i] = sp.cross_limit_H(ck, t, sums[i], sums[j])
    return build_problem(variant, hyper, sums, cross, Einv, gammas)


# ---------------------------------------------------------------- plug-in inputs

class PluginContext:
    """Caches eigendecompositions for plug-in problems over a lambda grid."""

    def __init__(self, moments: Sequence[PopulationMoments]):
        self.moments = list(moments)
        self.K = len(self.moments)
        self.p = self.moments[0].p
        self.gammas = np.array([mo.gamma_k for mo in self.moments])
        self._pooled = None

    @property
    def pooled(self) -> CovEig:
        if self._pooled is None:
            self._pooled = CovEig(pooled_covariance(self.moments))
        return self._pooled

    @property
    def gamma_bar(self) -> float:
        return pooled_gamma(self.moments)

    def pooled_mean_inv_T(self) -> float:
        return sp.est_mean_inv_T(self.pooled.spectrum(self.gamma_bar))

    def target_mean_inv_T(self) -> float:
        mo = self.moments[-1]
        return sp.est_mean_inv_T(mo.eig.spectrum(mo.gamma_k))

    def directions(self, lams, pooled=False) -> list[DiscriminantDirection]:
        lams = np.broadcast_to(np.asarray(lams, float), (self.K,))
        if pooled:
            return [discriminant_direction(mo, None, l, True, eig=self.pooled)
                    for mo, l in zip(self.moments, lams)]
        return [discriminant_direction(mo, None, l, False, eig=mo.eig)
                for mo, l in zip(self.moments, lams)]


def plugin_problem(variant: str, hyper: HyperParams, ctx: PluginContext, lams,
                   mean_inv_T: Optional[float] = None) -> WeightProblem:
    """Weight problem with every limit replaced by its data-driven estimate."""
    kind, fam = variant.split("_")
    K, p = ctx.K, ctx.p
    lams = np.broadcast_to(np.asarray(lams, float), (K,))
    mos = ctx.moments
    if kind == "E" and mean_inv_T is None:
        if fam == "het":
            mean_inv_T = ctx.target_mean_inv_T()
        else:
            gb = ctx.gamma_bar
            if gb >= 1:
                raise UnsupportedRegimeError(
                    "estimation weights need pooled aspect ratio < 1 (got %.3g); use a P variant" % gb)
            mean_inv_T = ctx.pooled_mean_inv_T()
    if fam == "pool":
        if not np.allclose(lams, lams[0], rtol=0, atol=1e-14):
            raise ContractError("pooled variants require a common lambda")
        s = sp.stieltjes_from_eigs(ctx.pooled.spectrum(ctx.gamma_bar), float(lams[0]))
        return build_problem(variant, hyper, [s] * K, None, mean_inv_T, ctx.gammas)

    sums = [sp.stieltjes_from_eigs(mo.eig.spectrum(mo.gamma_k), l) for mo, l in zip(mos, lams)]
    Rs = [mo.eig.resolvent(l) for mo, l in zip(mos, lams)]
    cross = np.zeros((K, K))
    inv_traces = None
    if kind == "E":
        for i in range(K):
            for j in range(i + 1, K):
                cross[i, j] = cross[j, i] = sp.cross_trace("E", Rs[i], Rs[j])
        if fam == "het":
            inv_traces = np.full(K, np.nan)
            gK = mos[-1].gamma_k
            for k in range(K - 1):
                inv_traces[k] = sp.est_trace_SigmaKinv_resolvent(mos[-1].sigma_hat, gK, Rs[k])
    else:
        SK = mos[-1].sigma_hat
        sK = sums[-1]
        xK = sp.x_from_sample(sK.m, mos[-1].gamma_k, sK.lam)
        for i in range(K - 1):
            lo = i if fam == "het" else i + 1
            for j in range(lo, K - 1):
                cross[i, j] = cross[j, i] = sp.cross_trace("M", Rs[i], Rs[j], SK)
            cross[i, K - 1] = cross[K - 1, i] = sp.est_Y_or_M_targetside(Rs[i], Rs[-1], sK.lam, xK)
    return build_problem(variant, hyper, sums, cross, mean_inv_T, ctx.gammas, inv_traces)


@dataclass
class TransferFit:
    variant: str
    lams: np.ndarray
    directions: list
    problem: WeightProblem
    weights: TransferWeights
    classifier: DiscriminantDirection


def fit_transfer(variant: str, hyper: HyperParams, ctx: PluginContext, lams,
                 mean_inv_T: Optional[float] = None) -> TransferFit:
    lams = np.broadcast_to(np.asarray(lams, float), (ctx.K,)).copy()
    prob = plugin_problem(variant, hyper, ctx, lams, mean_inv_T)
    tw = solve_weights(prob)
    if not np.any(tw.w):
        # no estimated target signal: fall back to the target-only direction
        log.warning("all transfer weights are zero; using the target direction alone")
        w = np.zeros(ctx.K)
        w[-1] = 1.0
        tw = TransferWeights(w, variant, float("nan"), tw.condition_estimate)
    dirs = ctx.directions(lams, pooled=family(variant) == "pool")
    return TransferFit(variant, lams, dirs, prob, tw, combine(dirs, tw.w))
