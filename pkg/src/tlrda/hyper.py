"""Signal strength and cross-population correlation estimates."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .sample import PopulationMoments

log = logging.getLogger(__name__)


@dataclass
class HyperParams:
    alpha_sq: np.ndarray
    rho: np.ndarray
    provenance: str = "estimated"

    def __post_init__(self):
        a = np.asarray(self.alpha_sq, dtype=float).ravel()
        r = np.atleast_2d(np.asarray(self.rho, dtype=float))
        K = a.size
        if r.shape != (K, K):
            raise ContractError("rho must be %dx%d" % (K, K))
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ContractError("alpha_sq must be finite and non-negative")
        if not np.allclose(r, r.T, atol=1e-12):
            raise ContractError("rho must be symmetric")
        if not np.allclose(np.diag(r), 1.0, atol=1e-12):
            raise ContractError("rho must have unit diagonal")
        if self.provenance not in ("estimated", "user_supplied"):
            raise ContractError("unknown provenance %r" % self.provenance)
        self.alpha_sq = a
        self.rho = 0.5 * (r + r.T)

    @property
    def K(self) -> int:
        return self.alpha_sq.size

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.alpha_sq)

    def cross_cov(self) -> np.ndarray:
        """[rho_kk' alpha_k alpha_k']"""
        a = self.alpha
        return self.rho * np.outer(a, a)

    def is_psd(self, tol=1e-8) -> bool:
        return bool(np.linalg.eigvalsh(self.cross_cov()).min() >= -tol)

    def to_dict(self):
        return {"alpha_sq": self.alpha_sq.tolist(), "rho": self.rho.tolist(),
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d, provenance="user_supplied"):
        return cls(np.asarray(d["alpha_sq"], float), np.asarray(d["rho"], float),
                   d.get("provenance", provenance))

    @classmethod
    def equicorrelated(cls, alpha_sq, rho, provenance="user_supplied"):
        a = np.broadcast_to(np.asarray(alpha_sq, float), np.shape(alpha_sq) or (1,)).copy()
        K = a.size
        R = np.full((K, K), float(rho))
        np.fill_diagonal(R, 1.0)
        return cls(a, R, provenance)


def noise_level(mo: PopulationMoments) -> float:
    """Expected squared norm of the noise in delta_hat when Sigma has unit diagonal."""
    return mo.p * (0.25 / mo.n_plus + 0.25 / mo.n_minus)


def estimate_alpha_sq(mo: PopulationMoments) -> float:
    return max(0.0, float(mo.delta_hat @ mo.delta_hat) - noise_level(mo))


def estimate_rho(mo_k: PopulationMoments, mo_kp: PopulationMoments,
                 alpha_sq_k: float, alpha_sq_kp: float) -> float:
    # independent noises: the cross moment needs no debiasing
    if alpha_sq_k <= 0 or alpha_sq_kp <= 0:
        raise ContractError("correlation undefined when an estimated signal strength is zero")
    r = float(mo_k.delta_hat @ mo_kp.delta_hat) / np.sqrt(alpha_sq_k * alpha_sq_kp)
    return float(np.clip(r, -1.0, 1.0))


def project_psd(hp: HyperParams, tol=1e-12) -> HyperParams:
    """Nearest-by-eigenclip PSD correlation with unit diagonal.

    [rho alpha alpha'] = D rho D with D = diag(alpha), so for positive alphas
    it is PSD exactly when rho is; we clip rho and rescale to unit diagonal.
    """
    r = hp.rho
    w, V = np.linalg.eigh(r)
    if w.min() >= -tol:
        return HyperParams(hp.alpha_sq.copy(), r.copy(), hp.provenance)
    C = (V * np.clip(w, 0.0, None)) @ V.T
    d = np.sqrt(np.clip(np.diag(C), 1e-300, None))
    C = C / np.outer(d, d)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return HyperParams(hp.alpha_sq.copy(), np.clip(C, -1.0, 1.0), hp.provenance)


def estimate_hyper(moments: Sequence[PopulationMoments], project=True) -> HyperParams:
    K = len(moments)
    a = np.array([estimate_alpha_sq(mo) for mo in moments])
    R = np.eye(K)
    for i in range(K):
        for j in range(i + 1, K):
            if a[i] > 0 and a[j] > 0:
                R[i, j] = R[j, i] = estimate_rho(moments[i], moments[j], a[i], a[j])
            else:
                log.warning("zero signal estimate for population pair (%d, %d); rho set to 0", i + 1, j + 1)
    hp = HyperParams(a, R, "estimated")
    return project_psd(hp) if project else hp
