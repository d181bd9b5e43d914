"""Stieltjes-transform machinery for regularized sample covariance resolvents.

Everything is evaluated on the negative real axis z = -lam.  For a sample
covariance with aspect ratio gamma = p/n we use

    m(-lam)  = tr((S + lam I)^-1) / p
    m'(-lam) = tr((S + lam I)^-2) / p
    v        = gamma * m + (1 - gamma) / lam              (companion transform)
    v'       = gamma * (m' - 1/lam^2) + 1/lam^2

and the deterministic equivalent (S + lam I)^-1 ~ (x Sigma + lam I)^-1 where x
solves 1 - x = gamma * [1 - lam * int (x t + lam)^-1 dH(t)].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .errors import ContractError, NumericalError, UnsupportedRegimeError

CROSS_KINDS = ("E", "M", "U", "Y")

X_FLOOR = 1e-12
FP_MAXITER = 10_000
FP_TOL = 1e-10


@dataclass(frozen=True)
class EigenSpectrum:
    """Eigenvalues of a covariance (sample or population).

    aspect_gamma is p/n for a sample covariance and 0 for a population matrix.
    """
    eigenvalues: np.ndarray
    aspect_gamma: float = 0.0

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=float).ravel()
        if ev.size == 0:
            raise ContractError("empty spectrum")
        if not np.all(np.isfinite(ev)):
            raise ContractError("non-finite eigenvalue")
        # tiny negative values from floating point eigh are clipped
        scale = max(float(np.abs(ev).max()), 1.0)
        if ev.min() < -1e-8 * scale:
            raise ContractError("negative eigenvalue %.3g" % ev.min())
        ev = np.sort(np.clip(ev, 0.0, None))[::-1]
        object.__setattr__(self, "eigenvalues", ev)
        if self.aspect_gamma < 0:
            raise ContractError("aspect_gamma must be >= 0")

    @property
    def dim_p(self) -> int:
        return int(self.eigenvalues.size)

    @classmethod
    def from_matrix(cls, S, aspect_gamma=0.0):
        return cls(np.linalg.eigvalsh(np.asarray(S, dtype=float)), aspect_gamma)


@dataclass(frozen=True)
class SpectralSummary:
    lam: float
    gamma: float
    m: float
    v: float
    m_prime: float
    v_prime: float

    @property
    def x(self) -> float:
        """Deterministic-equivalent scale x = 1 - gamma + gamma*lam*m."""
        return 1.0 - self.gamma + self.gamma * self.lam * self.m

    def check(self, tol=1e-12) -> bool:
        v, vp = companion(self.m, self.m_prime, self.gamma, self.lam)
        return abs(v - self.v) <= tol * max(1.0, abs(v)) and \
            abs(vp - self.v_prime) <= tol * max(1.0, abs(vp))


def _check_lam(lam):
    if not np.isfinite(lam) or lam <= 0:
        raise ContractError("lambda must be positive, got %r" % (lam,))


def companion(m, m_prime, gamma, lam):
    """Companion transform and its derivative at z = -lam."""
    v = gamma * m + (1.0 - gamma) / lam
    v_prime = gamma * (m_prime - 1.0 / lam**2) + 1.0 / lam**2
    return v, v_prime


def summary_from_m(m, m_prime, gamma, lam) -> SpectralSummary:
    v, vp = companion(m, m_prime, gamma, lam)
    return SpectralSummary(float(lam), float(gamma), float(m), float(v), float(m_prime), float(vp))


def stieltjes_from_eigs(spec: EigenSpectrum, lam: float, gamma: Optional[float] = None) -> SpectralSummary:
    """Empirical m, m' from eigenvalues; v, v' through the companion relations."""
    _check_lam(lam)
    g = spec.aspect_gamma if gamma is None else gamma
    if g <= 0:
        raise ContractError("companion transform needs aspect_gamma > 0")
    r = 1.0 / (spec.eigenvalues + lam)
    return summary_from_m(r.mean(), (r * r).mean(), g, lam)


# ---------------------------------------------------------------- identity Sigma

def mp_identity_m(gamma: float, lam: float) -> float:
    """Marchenko-Pastur Stieltjes transform at -lam for Sigma = I."""
    _check_lam(lam)
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    b = 1.0 - gamma + lam
    disc = np.sqrt(b * b + 4.0 * gamma * lam)
    # rationalized form of (-b + disc)/(2 gamma lam); avoids cancellation as gamma -> 0
    return float(2.0 / (b + disc))


def mp_identity_m_prime(gamma: float, lam: float) -> float:
    m = mp_identity_m(gamma, lam)
    return float(m * m * (1.0 + gamma * m) / (1.0 + gamma * lam * m * m))


def mp_summary(gamma, lam) -> SpectralSummary:
    return summary_from_m(mp_identity_m(gamma, lam), mp_identity_m_prime(gamma, lam), gamma, lam)


# ---------------------------------------------------------------- general H

def _h_eigs(H):
    if isinstance(H, EigenSpectrum):
        return H.eigenvalues
    return np.asarray(H, dtype=float).ravel()


def fixed_point_x(H, gamma: float, lam: float) -> float:
    """Solve 1 - x = gamma*[1 - lam*mean(1/(x t + lam))] for x in (0, 1].

    H is the spectrum standing in for the population distribution.  The map
    is monotone so a bracketing root finder on (X_FLOOR, 1] suffices.
    """
    _check_lam(lam)
    t = _h_eigs(H)
    if np.any(t <= 0):
        raise ContractError("H proxy eigenvalues must be strictly positive")
    if gamma <= 0:
        raise ContractError("gamma must be positive")

    def f(x):
        return 1.0 - x - gamma * (1.0 - lam * np.mean(1.0 / (x * t + lam)))

    f1 = f(1.0)
    if abs(f1) <= FP_TOL:
        return 1.0
    flo = f(X_FLOOR)
    if flo <= 0:
        # only possible when gamma*(1-lam*mean(1/(x t+lam))) >= 1 near 0; numerically x -> 0
        return X_FLOOR
    x, info = brentq(f, X_FLOOR, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                     maxiter=FP_MAXITER, full_output=True)
    res = abs(f(x))
    if not info.converged or res > FP_TOL:
        raise NumericalError("fixed point did not converge (residual %.3g)" % res, residual=res)
    return float(x)


def population_summary(H, gamma: float, lam: float) -> SpectralSummary:
    """Limiting SpectralSummary of a sample covariance with population spectrum H."""
    t = _h_eigs(H)
    x = fixed_point_x(t, gamma, lam)
    d = x * t + lam
    i1 = np.mean(1.0 / d)
    i2 = np.mean(1.0 / d**2)
    j2 = np.mean(t / d**2)
    x_prime = gamma * (i1 - lam * i2) / (1.0 + gamma * lam * j2)
    m_prime = x_prime * j2 + i2
    return summary_from_m(i1, m_prime, gamma, lam)


def cross_limit_H(kind: str, H, s1: SpectralSummary, s2: SpectralSummary, W_eigs=None) -> float:
    """Limit of tr(R1 R2 W)/p for independent samples sharing population spectrum H.

    kind E: W = I; kind M: W = Sigma.  W_eigs overrides the weight (diagonal in
    the eigenbasis of Sigma).
    """
    t = _h_eigs(H)
    if W_eigs is None:
        W_eigs = t if kind in ("M", "Y") else np.ones_like(t)
    return float(np.mean(W_eigs / ((s1.x * t + s1.lam) * (s2.x * t + s2.lam))))


def mean_inv_T(H) -> float:
    return float(np.mean(1.0 / _h_eigs(H)))


# ---------------------------------------------------------------- closed forms

def _equal_E(s: SpectralSummary) -> float:
    g, lam, m, mp = s.gamma, s.lam, s.m, s.m_prime
    return ((1 - g) * mp + 2 * g * lam * m * mp - g * m * m) / (1 - g + g * lam**2 * mp)


def _equal_M(s: SpectralSummary) -> float:
    g, lam, m, mp = s.gamma, s.lam, s.m, s.m_prime
    return (m - lam * mp) / (1 - g + g * lam**2 * mp)


def _closed_form(kind, case, s1, s2):
    if case == "identity":
        return s1.m * s2.m
    if case == "equal":
        return _equal_E(s1) if kind == "E" else _equal_M(s1)
    if case != "anisotropic":
        raise ContractError("unknown closed-form case %r" % (case,))
    x1, l1, m1 = s1.x, s1.lam, s1.m
    x2, l2, m2 = s2.x, s2.lam, s2.m
    den = x1 * l2 - x2 * l1
    if abs(den) < 1e-8 * max(abs(x1 * l2), abs(x2 * l1)):
        # both resolvents share the ratio x/lam: removable singularity
        c = l2 / l1
        base = _equal_E(s1) if kind == "E" else _equal_M(s1)
        return base / c
    if kind == "E":
        return (x1 * m1 - x2 * m2) / den
    return (l1 * m1 - l2 * m2) / (-den)


def closed_form_E(case: str, s1: SpectralSummary, s2: Optional[SpectralSummary] = None) -> float:
    """Limit of tr(R_k R_k')/p for independent samples, k != k'.

    Summaries must hold limiting (deterministic-equivalent) m and m'.
    case 'equal' uses s1 only; 'identity' is the Sigma = I product m_k m_k'.
    """
    return float(_closed_form("E", case, s1, s2 if s2 is not None else s1))


def closed_form_M(case: str, s1: SpectralSummary, s2: Optional[SpectralSummary] = None) -> float:
    """Limit of tr(R_k R_k' Sigma)/p for independent samples, k != k'."""
    return float(_closed_form("M", case, s1, s2 if s2 is not None else s1))


# ---------------------------------------------------------------- finite-p estimators

def cross_trace(kind: str, R1, R2, W=None) -> float:
    """Exact (1/p) tr(R1 R2 W); W defaults to the identity."""
    if kind not in CROSS_KINDS:
        raise ContractError("kind must be one of %s" % (CROSS_KINDS,))
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    p = R1.shape[0]
    if R1.shape != (p, p) or R2.shape != (p, p):
        raise ContractError("resolvents must be square with matching size")
    if W is None:
        if kind in ("M", "Y"):
            raise ContractError("kind %s needs a weight matrix" % kind)
        # tr(AB) = sum(A * B^T), B symmetric
        return float(np.einsum("ij,ji->", R1, R2) / p)
    W = np.asarray(W, dtype=float)
    if W.shape != (p, p):
        raise ContractError("weight matrix dimension mismatch")
    return float(np.einsum("ij,ji->", R1 @ R2, W) / p)


def est_mean_inv_T(spec: EigenSpectrum, gamma: Optional[float] = None) -> float:
    """(1 - gamma) * mean(1/l) estimates E(T^-1) when gamma < 1."""
    g = spec.aspect_gamma if gamma is None else gamma
    if g >= 1:
        raise UnsupportedRegimeError(
            "E(T^-1) is not estimable for gamma >= 1; use a pooled covariance with gamma < 1")
    ev = spec.eigenvalues
    if np.any(ev <= 0):
        raise ContractError("sample covariance is singular")
    return float((1.0 - g) * np.mean(1.0 / ev))


def est_trace_SigmaKinv_resolvent(SigmaK_hat, gamma_K: float, R_k) -> float:
    """(1 - gamma_K) tr(SigmaK_hat^-1 R_k)/p, estimating tr(Sigma_K^-1 R_k)/p."""
    if gamma_K >= 1:
        raise UnsupportedRegimeError("target covariance is singular for gamma_K >= 1")
    S = np.asarray(SigmaK_hat, dtype=float)
    R_k = np.asarray(R_k, dtype=float)
    p = S.shape[0]
    try:
        fac = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as e:
        raise NumericalError("target sample covariance is singular; use the pooled covariance") from e
    return float((1.0 - gamma_K) * np.trace(cho_solve(fac, R_k)) / p)


def x_from_sample(m_hat: float, gamma: float, lam: float) -> float:
    """Consistent estimate of the fixed point: x = 1 - gamma + gamma*lam*m."""
    return 1.0 - gamma + gamma * lam * m_hat


def est_Y_or_M_targetside(R_kp, R_K, lam_K: float, x_p: float) -> float:
    """(1/(p x)) tr R_k' - (lam_K/(p x)) tr(R_K R_k')."""
    if not x_p > 0:
        raise ContractError("x_p must be positive")
    R_kp = np.asarray(R_kp, dtype=float)
    p = R_kp.shape[0]
    return float((np.trace(R_kp) - lam_K * np.einsum("ij,ji->", R_K, R_kp)) / (p * x_p))
