"""
Gaussian moments (μ_k, Σ_k) of the predictor output under one augmentation,
by first-order propagation of the induced input covariance or by sampling.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from vbtta.augment import augment_batch, induced_distribution_sample, spec_stream
from vbtta.errors import DegenerateInputError, DomainError
from vbtta.mathstats import Rng

logger = logging.getLogger(__name__)

COVARIANCE_SAMPLES = 10_000
COVARIANCE_SEED = 20_240_917
SHRINKAGE = 1e-6
PROVENANCES = ("delta", "monte_carlo")
COVARIANCE_CACHE_SIZE = 512

# least recently used entry is evicted first
_covariance_cache = OrderedDict()


@dataclass(frozen=True)
class NoiseConfig:
    sigma_eps: float = 0.01
    n_aug: int = 1

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_eps, dtype=float) <= 0):
            raise DomainError(f"observation noise variance must be positive, got {self.sigma_eps}")
        if self.n_aug < 1:
            raise DomainError(f"n_aug must be at least 1, got {self.n_aug}")

    def variance_floor(self, out_dim):
        return np.broadcast_to(np.asarray(self.sigma_eps, dtype=float), (out_dim,)).copy()


@dataclass(frozen=True, eq=False)
class ComponentMoments:
    mean: np.ndarray
    variance: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DomainError(f"unknown provenance '{self.provenance}'")
        if np.any(~(np.asarray(self.variance) > 0)):
            raise DomainError(f"component variances must be positive, got {self.variance}")


def _pool_key(pool):
    return None if pool is None else hash(pool.instances.tobytes())


def clear_covariance_cache():
    _covariance_cache.clear()


def input_covariance(spec, x, pool=None):
    """
    Covariance Σ_k of the augmented input around x.

    Exact σ²I for additive Gaussian noise; otherwise the empirical covariance of
    a fixed-seed induced sample, shrunk toward its diagonal by 1e-6 of the mean
    variance. The most recent COVARIANCE_CACHE_SIZE results are cached per
    (augmentation, x, pool).
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if spec.kind == "gaussian_noise":
        sigma = np.broadcast_to(np.asarray(spec.params["sigma"], dtype=float), (d,))
        cov = np.diag(sigma ** 2)
        if not np.all(sigma > 0):
            raise DegenerateInputError(f"{spec.canonical()} has zero spread")
        return cov

    key = (spec.canonical(), x.tobytes(), _pool_key(pool))
    cached = _covariance_cache.get(key)
    if cached is not None:
        _covariance_cache.move_to_end(key)
        return cached.copy()

    samples = induced_distribution_sample(spec, x, COVARIANCE_SAMPLES, Rng(COVARIANCE_SEED), pool=pool)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    cov += SHRINKAGE * (np.trace(cov) / d) * np.eye(d)
    try:
        if not np.trace(cov) > 0:
            raise np.linalg.LinAlgError
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DegenerateInputError(f"{spec.canonical()} induces a singular input covariance")
    _covariance_cache[key] = cov
    while len(_covariance_cache) > COVARIANCE_CACHE_SIZE:
        _covariance_cache.popitem(last=False)
    return cov.copy()


def delta_method_moments(model, x, spec, noise, pool=None):
    """μ_k = f(x); per output i, variance = gᵢᵀ Σ_k gᵢ / n_aug + σ_ε with g = ∇f at x"""
    x = np.asarray(x, dtype=float)
    cov = input_covariance(spec, x, pool=pool)
    J = model.input_gradient(x)
    spread = np.einsum("od,de,oe->o", J, cov, J) / noise.n_aug
    return ComponentMoments(
        mean=model.forward(x),
        variance=np.maximum(spread, 0.0) + noise.variance_floor(model.output_dim),
        provenance="delta",
    )


def mc_moments(model, x, spec, n_samples, noise, rng, pool=None):
    if n_samples < 2:
        raise DomainError(f"Monte-Carlo moments need at least 2 samples, got {n_samples}")
    samples = induced_distribution_sample(spec, x, n_samples, rng, pool=pool)
    outputs = model.forward(samples)
    return ComponentMoments(
        mean=outputs.mean(axis=0),
        variance=outputs.var(axis=0, ddof=1) + noise.variance_floor(model.output_dim),
        provenance="monte_carlo",
    )


def moments_table(model, X, specs, noise, method, rng, pool=None, n_samples=64):
    """
    Moments for every instance and augmentation.

    Returns (means, variances), each of shape (n, K, out).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, K, out = X.shape[0], len(specs), model.output_dim
    means = np.empty((n, K, out))
    variances = np.empty((n, K, out))
    for k, spec in enumerate(specs):
        if method == "delta":
            for i in range(n):
                m = delta_method_moments(model, X[i], spec, noise, pool=pool)
                means[i, k], variances[i, k] = m.mean, m.variance
        elif method == "monte_carlo":
            if n_samples < 2:
                raise DomainError(f"Monte-Carlo moments need at least 2 samples, got {n_samples}")
            batch = augment_batch(spec, X, n_samples, spec_stream(rng, spec), pool=pool)
            outputs = model.forward(batch.reshape(n * n_samples, -1)).reshape(n, n_samples, out)
            means[:, k] = outputs.mean(axis=1)
            variances[:, k] = outputs.var(axis=1, ddof=1) + noise.variance_floor(out)
        else:
            raise DomainError(f"unknown moment method '{method}'")
        logger.debug(f"moments for {spec.canonical()}: mean variance {variances[:, k].mean():.4g}")
    return means, variances
