"""Per-population data containers and plug-in moment estimators."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, DataError, NumericalError
from .spectral import EigenSpectrum


@dataclass
class PopulationSample:
    features: np.ndarray
    labels: np.ndarray
    population_id: int = 1

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels).ravel()
        if X.ndim != 2:
            raise DataError("features must be a 2-d array")
        if X.shape[0] != y.size:
            raise DataError("features and labels disagree in length")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature values in population %s" % self.population_id)
        if not np.all(np.isin(y, (-1, 1))):
            raise DataError("labels must be -1 or +1")
        self.features = X
        self.labels = y.astype(int)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "PopulationSample":
        return PopulationSample(self.features[idx], self.labels[idx], self.population_id)


class CovEig:
    """Symmetric eigendecomposition cache; resolvents for any lambda reuse it."""

    def __init__(self, cov):
        cov = np.asarray(cov, dtype=float)
        evals, evecs = np.linalg.eigh(cov)
        self.evals = np.clip(evals, 0.0, None)
        self.evecs = evecs
        self.p = cov.shape[0]

    def resolvent(self, lam: float) -> np.ndarray:
        U = self.evecs
        return (U / (self.evals + lam)) @ U.T

    def solve(self, lam: float, b) -> np.ndarray:
        c = self.evecs.T @ b
        scale = 1.0 / (self.evals + lam)
        return self.evecs @ (c * scale if c.ndim == 1 else c * scale[:, None])

    def spectrum(self, gamma: float = 0.0) -> EigenSpectrum:
        return EigenSpectrum(self.evals, gamma)


@dataclass
class PopulationMoments:
    mu_plus: np.ndarray
    mu_minus: np.ndarray
    delta_hat: np.ndarray
    sigma_hat: np.ndarray
    n_plus: int
    n_minus: int
    population_id: int = 1
    _scatter: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_k(self) -> int:
        return self.n_plus + self.n_minus

    @property
    def p(self) -> int:
        return self.delta_hat.size

    @property
    def gamma_k(self) -> float:
        return self.p / self.n_k

    @property
    def gamma_plus(self) -> float:
        return self.p / self.n_plus

    @property
    def gamma_minus(self) -> float:
        return self.p / self.n_minus

    @property
    def scatter(self) -> np.ndarray:
        if self._scatter is None:
            return self.sigma_hat * (self.n_k - 2)
        return self._scatter

    @cached_property
    def eig(self) -> CovEig:
        return CovEig(self.sigma_hat)


def compute_moments(sample: PopulationSample) -> PopulationMoments:
    """Class means, half mean difference and within-class covariance (divisor n - 2)."""
    X, y = sample.features, sample.labels
    pos = y == 1
    neg = ~pos
    n_plus, n_minus = int(pos.sum()), int(neg.sum())
    if n_plus == 0 or n_minus == 0:
        raise DataError("population %s is missing a class" % sample.population_id)
    if n_plus + n_minus < 3:
        raise DataError("population %s needs at least 3 observations" % sample.population_id)
    mu_p = X[pos].mean(axis=0)
    mu_m = X[neg].mean(axis=0)
    Xc = np.where(pos[:, None], X - mu_p, X - mu_m)
    scatter = Xc.T @ Xc
    scatter = 0.5 * (scatter + scatter.T)
    return PopulationMoments(mu_p, mu_m, 0.5 * (mu_p - mu_m), scatter / (n_plus + n_minus - 2),
                             n_plus, n_minus, sample.population_id, scatter)


def pooled_covariance(moments: Sequence[PopulationMoments], samples=None) -> np.ndarray:
    """Within-class scatter summed over populations divided by sum(n_k - 2).

    samples is accepted for interface symmetry; the scatter is carried by the moments.
    """
    if len(moments) == 0:
        raise ContractError("need at least one population")
    p = moments[0].p
    if any(mo.p != p for mo in moments):
        raise ContractError("populations disagree in dimension")
    tot = np.zeros((p, p))
    dof = 0
    for mo in moments:
        tot += mo.scatter
        dof += mo.n_k - 2
    return tot / dof


def pooled_gamma(moments: Sequence[PopulationMoments]) -> float:
    return moments[0].p / sum(mo.n_k for mo in moments)


@dataclass
class DiscriminantDirection:
    direction: np.ndarray
    intercept: float
    lam: float
    pooled: bool = False

    def score(self, X) -> np.ndarray:
        return np.asarray(X) @ self.direction + self.intercept


def discriminant_direction(moments: PopulationMoments, cov, lam: float, pooled: bool = False,
                           eig: Optional[CovEig] = None) -> DiscriminantDirection:
    """Ridge discriminant (cov + lam I)^-1 delta_hat and its intercept."""
    if not lam > 0:
        raise ContractError("lambda must be positive")
    mid = 0.5 * (moments.mu_plus + moments.mu_minus)
    if eig is not None:
        d = eig.solve(lam, moments.delta_hat)
    else:
        A = np.asarray(cov, dtype=float) + lam * np.eye(moments.p)
        try:
            d = cho_solve(cho_factor(A, lower=True), moments.delta_hat)
        except np.linalg.LinAlgError as e:
            raise NumericalError("regularized covariance is not positive definite") from e
    if not np.all(np.isfinite(d)):
        raise NumericalError("non-finite discriminant direction")
    return DiscriminantDirection(d, float(-d @ mid), float(lam), pooled)


def combine(directions: Sequence[DiscriminantDirection], w) -> DiscriminantDirection:
    """Weighted direction sum(w_k d_k); the intercept is the target's (last) intercept."""
    w = np.asarray(w, dtype=float)
    D = np.column_stack([d.direction for d in directions])
    return DiscriminantDirection(D @ w, directions[-1].intercept, directions[-1].lam,
                                 directions[-1].pooled)
