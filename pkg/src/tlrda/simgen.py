"""Synthetic multi-population Gaussian mixtures with correlated class offsets."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import toeplitz

from .errors import ContractError
from .sample import PopulationSample

DEFAULT_AR1 = 0.5


@dataclass
class CovSpec:
    """Covariance recipe.

    kind: 'identity', 'ar1' (Sigma_ij = t^|i-j|) or 'custom' (diagonal with eigs).
    power: if not 1, the eigenvalues are raised to this power and rescaled to
    mean one, keeping the eigenvectors (power > 1 decays faster).
    decay: if set, the sorted eigenvalues are replaced by i^-decay (i = 1..p)
    rescaled to mean one, keeping the eigenvectors in the same order.
    """
    kind: str = "ar1"
    t: float = DEFAULT_AR1
    eigs: Optional[list] = None
    power: float = 1.0
    decay: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("identity", "ar1", "custom"):
            raise ContractError("unknown covariance kind %r" % self.kind)
        if self.kind == "ar1" and not -1 < self.t < 1:
            raise ContractError("AR(1) parameter must lie in (-1, 1)")

    def matrix(self, p: int) -> np.ndarray:
        if self.kind == "identity":
            S = np.eye(p)
        elif self.kind == "ar1":
            S = toeplitz(self.t ** np.arange(p))
        else:
            e = np.asarray(self.eigs, float)
            if e.size != p or np.any(e <= 0):
                raise ContractError("custom eigenvalues must be %d positive values" % p)
            S = np.diag(e)
        if self.power != 1.0 or self.decay is not None:
            w, V = np.linalg.eigh(S)
            if self.decay is not None:
                # eigh sorts ascending, so the largest new value sits on the top eigenvector
                w = np.arange(p, 0, -1, dtype=float) ** -float(self.decay)
            w = w ** self.power
            w = w / w.mean()
            S = (V * w) @ V.T
            S = 0.5 * (S + S.T)
        return S

    @classmethod
    def from_any(cls, x):
        if isinstance(x, CovSpec):
            return x
        if isinstance(x, str):
            return cls(kind=x)
        return cls(**x)


def _per_pop(x, K, name, cast=float):
    arr = np.asarray(x, dtype=cast)
    if arr.ndim == 0:
        return np.full(K, arr.item(), dtype=cast)
    if arr.size != K:
        raise ContractError("%s needs %d entries" % (name, K))
    return arr.ravel()


@dataclass
class SimConfig:
    p: int
    n: list
    alpha_sq: object = 0.5
    rho: object = 0.5
    cov: object = field(default_factory=CovSpec)
    heterogeneous_cov: Optional[list] = None
    test_cov: object = None
    class_balance: object = 0.5
    mu_bar_scale: float = 0.0
    n_test: int = 2000
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        self.n = [int(v) for v in np.atleast_1d(self.n)]
        K = len(self.n)
        if self.p <= 0 or min(self.n) <= 0 or self.n_test < 0:
            raise ContractError("p, n must be positive and n_test non-negative")
        self.alpha_sq = _per_pop(self.alpha_sq, K, "alpha_sq")
        r = np.asarray(self.rho, float)
        if r.ndim == 0:
            r = np.full((K, K), float(r))
            np.fill_diagonal(r, 1.0)
        if r.shape != (K, K):
            raise ContractError("rho must be a scalar or %dx%d" % (K, K))
        self.rho = r
        self.class_balance = _per_pop(self.class_balance, K, "class_balance")
        if np.any(self.class_balance <= 0) or np.any(self.class_balance >= 1):
            raise ContractError("class balance must lie in (0, 1)")
        self.cov = CovSpec.from_any(self.cov)
        if self.heterogeneous_cov is not None:
            if len(self.heterogeneous_cov) != K:
                raise ContractError("heterogeneous_cov needs %d entries" % K)
            self.heterogeneous_cov = [CovSpec.from_any(c) for c in self.heterogeneous_cov]
        if self.test_cov is not None:
            self.test_cov = CovSpec.from_any(self.test_cov)
        if self.mu_bar_scale < 0 or self.mu_bar_scale > np.sqrt(self.p):
            raise ContractError("mu_bar_scale must lie in [0, sqrt(p)]")
        if np.linalg.eigvalsh(self.cross_cov()).min() < -1e-10:
            raise ContractError("[rho alpha alpha'] is not positive semi-definite")

    @property
    def K(self) -> int:
        return len(self.n)

    def cross_cov(self) -> np.ndarray:
        a = np.sqrt(self.alpha_sq)
        return self.rho * np.outer(a, a)

    def cov_spec(self, k: int) -> CovSpec:
        """Covariance of population k (1-based)."""
        if self.heterogeneous_cov is not None:
            return self.heterogeneous_cov[k - 1]
        return self.cov

    def to_dict(self):
        d = asdict(self)
        for key in ("alpha_sq", "rho", "class_balance"):
            d[key] = np.asarray(getattr(self, key)).tolist()
        return d


def _stream(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _psd_sqrt(C):
    w, V = np.linalg.eigh(C)
    # rounding-level eigenvalues are exact zeros (e.g. rho = 1 gives rank one)
    w = np.where(w > 1e-12 * max(w.max(), 0.0), w, 0.0)
    return V * np.sqrt(w)


def draw_deltas(config: SimConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """K x p array; each coordinate is N(0, [rho alpha alpha'] / p) across populations."""
    rng = _stream(config.seed, 0) if rng is None else rng
    L = _psd_sqrt(config.cross_cov())
    Z = rng.standard_normal((config.p, config.K))
    return (Z @ L.T).T / np.sqrt(config.p)


class _CovCache:
    def __init__(self):
        self._c = {}

    def get(self, spec: CovSpec, p: int):
        key = (repr(spec), int(p))
        if key not in self._c:
            S = spec.matrix(p)
            self._c[key] = (S, np.linalg.cholesky(S))
        return self._c[key]


_COV = _CovCache()


def covariance(spec: CovSpec, p: int) -> np.ndarray:
    return _COV.get(spec, p)[0]


def _is_identity(spec: CovSpec) -> bool:
    return spec.kind == "identity" and spec.power == 1.0 and spec.decay is None


def _labels(rng, n, pi, stratified):
    if stratified:
        n_plus = int(round(pi * n))
        n_plus = min(max(n_plus, 1), n - 1) if n >= 2 else n_plus
        y = np.r_[np.ones(n_plus, int), -np.ones(n - n_plus, int)]
        return rng.permutation(y)
    return np.where(rng.random(n) < pi, 1, -1)


def draw_population(config: SimConfig, k: int, deltas, test: bool = False,
                    n: Optional[int] = None, rng=None) -> PopulationSample:
    """Training sample of population k (1-based) or, with test=True, a target test set."""
    K = config.K
    if not 1 <= k <= K:
        raise ContractError("population index out of range")
    if rng is None:
        rng = _stream(config.seed, 2 if test else 1, k)
    spec = config.test_cov if (test and config.test_cov is not None) else config.cov_spec(k)
    _, L = _COV.get(spec, config.p)
    if n is None:
        n = config.n_test if test else config.n[k - 1]
    y = _labels(rng, n, config.class_balance[k - 1], config.stratified)
    mu_bar = np.zeros(config.p)
    if config.mu_bar_scale > 0:
        mrng = _stream(config.seed, 3, k)
        e = mrng.standard_normal(config.p)
        mu_bar = config.mu_bar_scale * e / np.linalg.norm(e)
    Z = rng.standard_normal((n, config.p))
    noise = Z if _is_identity(spec) else Z @ L.T
    X = mu_bar + y[:, None] * deltas[k - 1] + noise
    return PopulationSample(X, y, k)


@dataclass
class SimDraw:
    train: list
    test: Optional[PopulationSample]
    deltas: np.ndarray


def simulate(config: SimConfig) -> SimDraw:
    deltas = draw_deltas(config)
    train = [draw_population(config, k, deltas) for k in range(1, config.K + 1)]
    test = draw_population(config, config.K, deltas, test=True) if config.n_test > 0 else None
    return SimDraw(train, test, deltas)


def replicate_config(config: SimConfig, rep: int) -> SimConfig:
    """Config for replicate rep; seeds derive deterministically from the base seed."""
    ss = np.random.SeedSequence(config.seed, spawn_key=(9, rep))
    d = config.to_dict()
    d["seed"] = int(ss.generate_state(1, dtype=np.uint32)[0])
    return SimConfig(**d)


def benchmark_config(**over) -> SimConfig:
    """Six-population Toeplitz benchmark: p=150, n=150..100, alpha^2=0.5, rho=0.5."""
    base = dict(p=150, n=[150, 140, 130, 120, 110, 100], alpha_sq=0.5, rho=0.5,
                cov=CovSpec("ar1", DEFAULT_AR1), n_test=2000, seed=0, stratified=True)
    base.update(over)
    return SimConfig(**base)
