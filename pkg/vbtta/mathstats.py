"""
Special functions, densities, samplers and quadrature shared by the rest of the package
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats

from vbtta.errors import ConvergenceError, DomainError, EvaluationError

logger = logging.getLogger(__name__)

LOG_2 = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

DEFAULT_QUAD_TOL = 1e-9


class Rng:
    """Seeded random stream; split(i) gives the i-th independent child stream"""

    def __init__(self, seed, key=()):
        seed = int(seed)
        if seed < 0 or seed >= 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = tuple(int(k) for k in key)
        self.generator = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=self.key))

    def split(self, i):
        # Children depend only on (seed, key, i), never on how much the parent consumed
        return Rng(self.seed, self.key + (int(i),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


@dataclass(frozen=True, eq=False)
class DistSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_spec(self)

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls("gaussian", {"mean": mean, "cov": cov})

    @classmethod
    def beta(cls, alpha):
        return cls("beta", {"alpha": float(alpha)})

    @classmethod
    def gamma(cls, shape, rate):
        return cls("gamma", {"shape": float(shape), "rate": float(rate)})

    @classmethod
    def wishart(cls, nu, rate_matrix):
        rate_matrix = np.atleast_2d(np.asarray(rate_matrix, dtype=float))
        return cls("wishart", {"nu": float(nu), "rate": rate_matrix})

    @property
    def dim(self):
        if self.kind == "gaussian":
            return self.params["mean"].shape[0]
        if self.kind == "wishart":
            return self.params["rate"].shape[0]
        return 1


def validate_spec(spec):
    kind, p = spec.kind, spec.params
    if kind == "gaussian":
        mean, cov = p["mean"], p["cov"]
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise DomainError(f"covariance shape {cov.shape} does not match mean length {mean.shape[0]}")
        check_spd(cov, "covariance")
    elif kind == "beta":
        if not p["alpha"] > 0:
            raise DomainError(f"beta parameter must be positive, got {p['alpha']}")
    elif kind == "gamma":
        if not (p["shape"] > 0 and p["rate"] > 0):
            raise DomainError(f"gamma shape and rate must be positive, got {p['shape']}, {p['rate']}")
    elif kind == "wishart":
        rate = p["rate"]
        c = rate.shape[0]
        if rate.shape != (c, c):
            raise DomainError(f"wishart rate matrix must be square, got {rate.shape}")
        if not p["nu"] > c - 1:
            raise DomainError(f"wishart degrees of freedom must exceed {c - 1}, got {p['nu']}")
        check_spd(rate, "wishart rate matrix")
    else:
        raise DomainError(f"unknown distribution kind '{kind}'")


def check_spd(matrix, name="matrix"):
    """Return the lower Cholesky factor, raising DomainError when the matrix is not SPD"""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if not np.allclose(matrix, matrix.T, rtol=1e-10, atol=1e-12):
        raise DomainError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        raise DomainError(f"{name} is not positive definite")


def logdet_spd(matrix):
    chol = check_spd(matrix)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def _positive(x, name):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} requires positive arguments, got {x}")
    return arr


def _scalar_or_array(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def lgamma(x):
    """ln Γ(x) for x > 0"""
    return _scalar_or_array(special.gammaln(_positive(x, "lgamma")))


def digamma(x):
    """ψ(x) = d/dx ln Γ(x) for x > 0"""
    return _scalar_or_array(special.psi(_positive(x, "digamma")))


def std_normal_cdf(z):
    return _scalar_or_array(special.ndtr(np.asarray(z, dtype=float)))


def std_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return _scalar_or_array(INV_SQRT_2PI * np.exp(-0.5 * z * z))


@dataclass(frozen=True)
class QuadratureResult:
    value: object
    error: float
    converged: bool
    evaluations: int = 0


def adaptive_quadrature(f, lower, upper, tol=DEFAULT_QUAD_TOL, strict=False, limit=2000):
    """
    Globally adaptive Gauss-Kronrod (15-point panels) integration of f over [lower, upper].

    Infinite endpoints are mapped onto a finite interval by quad_vec's change of
    variables. f may return a scalar or a fixed-length vector; the error
    estimate is the max-norm over components.
    """
    lower, upper = float(lower), float(upper)
    if math.isnan(lower) or math.isnan(upper):
        raise DomainError("integration limits must not be NaN")
    if lower == upper:
        return QuadratureResult(value=0.0, error=0.0, converged=True)
    sign = 1.0
    if lower > upper:
        lower, upper, sign = upper, lower, -1.0

    evaluations = 0

    def integrand(t):
        nonlocal evaluations
        evaluations += 1
        value = f(t)
        if np.any(np.isnan(value)):
            raise EvaluationError(f"integrand returned NaN at {t}")
        return value

    value, error, info = integrate.quad_vec(
        integrand, lower, upper,
        epsabs=tol, epsrel=0.0, norm="max", limit=limit,
        quadrature="gk15", full_output=True,
    )
    converged = bool(info.success) and error <= tol
    if not converged:
        message = f"quadrature over [{lower}, {upper}] stopped with error estimate {error:.3e} > {tol:.1e}"
        if strict:
            raise ConvergenceError(message)
        logger.warning(message)
    else:
        logger.debug(f"quadrature converged with error {error:.3e} after {evaluations} evaluations")
    return QuadratureResult(value=sign * value, error=float(error), converged=converged, evaluations=evaluations)


def sample(spec, rng, size=None):
    """Draw from a DistSpec. size=None gives one draw; an int gives a leading axis of that length"""
    gen = rng.generator
    p = spec.params
    if spec.kind == "gaussian":
        draws = gen.multivariate_normal(p["mean"], p["cov"], size=size, method="cholesky")
        return draws
    if spec.kind == "beta":
        return gen.beta(p["alpha"], p["alpha"], size=size)
    if spec.kind == "gamma":
        return gen.gamma(p["shape"], 1.0 / p["rate"], size=size)
    if spec.kind == "wishart":
        c = spec.dim
        scale = np.linalg.inv(p["rate"])
        # scipy draws through the Bartlett decomposition
        draws = stats.wishart(df=p["nu"], scale=scale).rvs(size=1 if size is None else size, random_state=gen)
        draws = np.asarray(draws, dtype=float).reshape((-1, c, c))
        return draws[0] if size is None else draws
    raise DomainError(f"unknown distribution kind '{spec.kind}'")


def univariate_density(spec):
    """(pdf, lower, upper) for the one-dimensional kinds, used to check normalization"""
    p = spec.params
    if spec.kind == "gaussian" and spec.dim == 1:
        frozen = stats.norm(loc=p["mean"][0], scale=math.sqrt(p["cov"][0, 0]))
        return frozen.pdf, -math.inf, math.inf
    if spec.kind == "beta":
        frozen = stats.beta(p["alpha"], p["alpha"])
        return frozen.pdf, 0.0, 1.0
    if spec.kind == "gamma":
        frozen = stats.gamma(p["shape"], scale=1.0 / p["rate"])
        return frozen.pdf, 0.0, math.inf
    if spec.kind == "wishart" and spec.dim == 1:
        frozen = stats.wishart(df=p["nu"], scale=1.0 / p["rate"][0, 0])
        return frozen.pdf, 0.0, math.inf
    raise DomainError(f"{spec.kind} of dimension {spec.dim} has no univariate density")


def wishart_expectations(nu, V_rate):
    """E[Λ] and E[ln|Λ|] for Λ ~ W(ν, V) in the rate (inverse-scale) convention"""
    V = np.atleast_2d(np.asarray(V_rate, dtype=float))
    c = V.shape[0]
    if not nu > c - 1:
        raise DomainError(f"wishart degrees of freedom must exceed {c - 1}, got {nu}")
    logdet = logdet_spd(V)
    E_precision = nu * np.linalg.inv(V)
    i = np.arange(1, c + 1)
    E_logdet = float(np.sum(special.psi((nu + 1.0 - i) / 2.0)) + c * LOG_2 - logdet)
    return E_precision, E_logdet


def wishart_log_normalizer(nu, V_rate):
    """ln B(ν, V) = (ν/2)ln|V| − (νc/2)ln 2 − ln Γ_c(ν/2), rate convention"""
    V = np.atleast_2d(np.asarray(V_rate, dtype=float))
    c = V.shape[0]
    return 0.5 * nu * logdet_spd(V) - 0.5 * nu * c * LOG_2 - float(special.multigammaln(0.5 * nu, c))


def log_gaussian_density(y, mean, variance):
    """Elementwise ln N(y | mean, variance) for scalar outputs"""
    y, mean, variance = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, mean, variance)))
    return -0.5 * (LOG_2PI + np.log(variance) + (y - mean) ** 2 / variance)
