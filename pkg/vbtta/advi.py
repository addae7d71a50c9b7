"""
Automatic-differentiation-free ADVI: constrained latents are mapped to ℝ^m, a
full-rank Gaussian q(ζ) = N(μ, LLᵀ) is fitted there by Adam ascent on the
Monte-Carlo ELBO, with log-joint gradients from central finite differences.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from vbtta.errors import DivergenceError, DomainError
from vbtta.mathstats import LOG_2, LOG_2PI, Rng, wishart_log_normalizer
from vbtta.optim import AdamState, adam_step
from vbtta.vbcore import SimplexWeights, initial_state, stack_residuals

logger = logging.getLogger(__name__)

BLOCK_KINDS = ("simplex", "positive_definite", "identity")
MAX_REJECTIONS = 100
FD_STEP = 1e-5
# smallest bank of standard normal draws shared by every ADVI step
COMMON_DRAWS = 256


@dataclass(frozen=True)
class TransformSpec:
    """Ordered (kind, size) blocks; simplex(K), positive_definite(c) or identity(n)"""
    blocks: tuple

    def __post_init__(self):
        blocks = tuple((str(kind), int(size)) for kind, size in self.blocks)
        for kind, size in blocks:
            if kind not in BLOCK_KINDS:
                raise DomainError(f"unknown transform block '{kind}'")
            if size < 1 or (kind == "simplex" and size < 2):
                raise DomainError(f"invalid size {size} for {kind} block")
        object.__setattr__(self, "blocks", blocks)

    @staticmethod
    def block_dim(kind, size):
        if kind == "simplex":
            return size - 1
        if kind == "positive_definite":
            return size * (size + 1) // 2
        return size

    @property
    def dim(self):
        return sum(self.block_dim(kind, size) for kind, size in self.blocks)

    def slices(self):
        start = 0
        for kind, size in self.blocks:
            width = self.block_dim(kind, size)
            yield kind, size, slice(start, start + width)
            start += width


def _simplex_forward(w):
    w = np.asarray(w, dtype=float)
    if np.any(~(w > 0)):
        raise DomainError(f"simplex point must lie in the interior, got {w}")
    if abs(w.sum() - 1.0) > 1e-9:
        raise DomainError(f"simplex point must sum to 1, got {w.sum()}")
    # additive log-ratio against the last coordinate
    return np.log(w[:-1]) - math.log(w[-1])


def _simplex_inverse(z):
    full = np.append(z, 0.0)
    log_w = full - special.logsumexp(full)
    return np.exp(log_w), float(np.sum(log_w))


def _pd_forward(Lambda, c):
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    if Lambda.shape != (c, c):
        raise DomainError(f"expected a {c}×{c} matrix, got {Lambda.shape}")
    try:
        chol = np.linalg.cholesky(0.5 * (Lambda + Lambda.T))
    except np.linalg.LinAlgError:
        raise DomainError("matrix is not positive definite")
    chol[np.diag_indices(c)] = np.log(np.diag(chol))
    return chol[np.tril_indices(c)]


def _pd_inverse(z, c):
    chol = np.zeros((c, c))
    chol[np.tril_indices(c)] = z
    log_diag = np.diag(chol).copy()
    chol[np.diag_indices(c)] = np.exp(log_diag)
    # |d vech(LLᵀ) / d vech(L)| = 2^c ∏ L_ii^{c-i+1}, times ∏ L_ii from the log diagonal
    powers = c - np.arange(c) + 1
    return chol @ chol.T, c * LOG_2 + float(np.sum(powers * log_diag))


def to_unconstrained(transform, eta):
    """Map the list of constrained block values to one vector ζ"""
    if len(eta) != len(transform.blocks):
        raise DomainError(f"{len(transform.blocks)} blocks but {len(eta)} values")
    parts = []
    for (kind, size), value in zip(transform.blocks, eta):
        if kind == "simplex":
            parts.append(_simplex_forward(value))
        elif kind == "positive_definite":
            parts.append(_pd_forward(value, size))
        else:
            parts.append(np.atleast_1d(np.asarray(value, dtype=float)).reshape(size))
    return np.concatenate(parts)


def from_unconstrained(transform, zeta):
    """(block values, ln|det J_{T⁻¹}(ζ)|)"""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (transform.dim,):
        raise DomainError(f"expected an unconstrained vector of length {transform.dim}, got {zeta.shape}")
    eta, log_det = [], 0.0
    for kind, size, sl in transform.slices():
        z = zeta[sl]
        if kind == "simplex":
            value, ld = _simplex_inverse(z)
        elif kind == "positive_definite":
            value, ld = _pd_inverse(z, size)
        else:
            value, ld = z.copy(), 0.0
        eta.append(value)
        log_det += ld
    return eta, log_det


@dataclass(eq=False)
class FullRankGaussian:
    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.chol = np.atleast_2d(np.asarray(self.chol, dtype=float))
        m = self.mean.shape[0]
        if self.chol.shape != (m, m):
            raise DomainError(f"factor of shape {self.chol.shape} for a mean of length {m}")
        if np.any(np.triu(self.chol, 1) != 0):
            raise DomainError("factor must be lower triangular")
        if np.any(~(np.diag(self.chol) > 0)):
            raise DomainError("factor diagonal must be positive")

    @classmethod
    def standard(cls, m, scale=1.0):
        return cls(np.zeros(m), scale * np.eye(m))

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def covariance(self):
        return self.chol @ self.chol.T

    def entropy(self):
        return 0.5 * self.dim * (1.0 + LOG_2PI) + float(np.sum(np.log(np.diag(self.chol))))

    def draw(self, eps):
        return self.mean + eps @ self.chol.T

    def log_density(self, zeta):
        diff = np.linalg.solve(self.chol, np.atleast_2d(zeta).T)
        return (-0.5 * np.sum(diff ** 2, axis=0) - 0.5 * self.dim * LOG_2PI
                - float(np.sum(np.log(np.diag(self.chol)))))


def _transformed_objective(transform, log_joint):
    def objective(zeta):
        eta, log_det = from_unconstrained(transform, zeta)
        return log_joint(eta) + log_det
    return objective


def _common_bank(gen, rows, m):
    """rows standard normal draws, moment-matched to sample mean 0 and sample covariance I"""
    bank = gen.standard_normal((rows, m))
    bank -= bank.mean(axis=0)
    chol = np.linalg.cholesky(bank.T @ bank / rows)
    return linalg.solve_triangular(chol, bank.T, lower=True).T


def _finite_draws(q, objective, n, gen, trace=None, fixed=None):
    """
    n (ε, value) pairs. Rows of fixed are used first; a row whose objective is
    not finite is replaced in place by a fresh draw, so the caller's bank keeps it.
    """
    eps = gen.standard_normal((n, q.dim)) if fixed is None else fixed
    values = np.empty(n)
    for i in range(n):
        rejections = 0
        while True:
            value = objective(q.draw(eps[i]))
            if math.isfinite(value):
                values[i] = value
                break
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise DivergenceError(f"log joint non-finite for {MAX_REJECTIONS} consecutive draws", trace=trace)
            eps[i] = gen.standard_normal(q.dim)
    return eps, values


def advi_elbo_estimate(q, transform, log_joint, n_mc, rng):
    """E_q[ln p(S, T⁻¹(ζ)) + ln|det J|] by reparameterized draws, plus the exact entropy"""
    if n_mc < 1:
        raise DomainError(f"n_mc must be at least 1, got {n_mc}")
    _, values = _finite_draws(q, _transformed_objective(transform, log_joint), n_mc, rng.generator)
    return float(values.mean()) + q.entropy()


def _fd_gradient(objective, zeta):
    grad = np.empty_like(zeta)
    for i in range(zeta.shape[0]):
        h = FD_STEP * (1.0 + abs(zeta[i]))
        up, down = zeta.copy(), zeta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (objective(up) - objective(down)) / (2.0 * h)
    return grad


def advi_fit(log_joint, transform, init, adam_config, n_steps, n_mc=1, rng=None, trace=None, callback=None):
    """
    Adam ascent on the Monte-Carlo ELBO over (μ, L), with ln L_ii as the free
    diagonal parameters.

    The ε draws come from one moment-matched bank sampled up front (at least
    COMMON_DRAWS rows and four per dimension); step s takes the next n_mc rows
    cyclically, so every step sees common random numbers.

    trace, when given, receives the ELBO estimate of every step; callback(step, q)
    is called with the distribution in effect at the start of each step.
    """
    rng = rng or Rng(0)
    gen = rng.generator
    objective = _transformed_objective(transform, log_joint)
    m = init.dim
    if m != transform.dim:
        raise DomainError(f"q has dimension {m} but the transform maps to {transform.dim}")
    if n_mc < 1:
        raise DomainError(f"n_mc must be at least 1, got {n_mc}")
    mean = init.mean.copy()
    lower = np.tril(init.chol, -1)
    log_diag = np.log(np.diag(init.chol)).copy()
    params = [mean, lower, log_diag]
    state = AdamState.zeros_like(params)
    history = trace if trace is not None else []
    strict_lower = np.tril(np.ones((m, m)), -1)
    batches = -(-max(COMMON_DRAWS, 4 * m, n_mc) // n_mc)
    bank = _common_bank(gen, batches * n_mc, m)

    for step in range(n_steps):
        chol = lower + np.diag(np.exp(log_diag))
        q = FullRankGaussian(mean, chol)
        if callback is not None:
            callback(step + 1, q)
        start = (step % batches) * n_mc
        eps, values = _finite_draws(q, objective, n_mc, gen, trace=history, fixed=bank[start:start + n_mc])
        g_mean = np.zeros(m)
        g_chol = np.zeros((m, m))
        for e in eps:
            g = _fd_gradient(objective, q.draw(e))
            g_mean += g
            g_chol += np.outer(g, e)
        g_mean /= n_mc
        g_chol /= n_mc
        g_lower = g_chol * strict_lower
        g_log_diag = np.diag(g_chol) * np.exp(log_diag) + 1.0

        estimate = float(values.mean()) + q.entropy()
        if not (math.isfinite(estimate) and np.all(np.isfinite(g_mean)) and np.all(np.isfinite(g_chol))):
            raise DivergenceError(f"ADVI diverged at step {step + 1}", trace=history)
        history.append(estimate)
        logger.debug(f"ADVI step {step + 1}: ELBO estimate {estimate:.6g}")
        adam_step(state, params, [g_mean, g_lower, g_log_diag], adam_config, maximize=True)

    return FullRankGaussian(mean.copy(), lower + np.diag(np.exp(log_diag)))


def weights_at_mean(q, transform):
    """Simplex weights of the first block evaluated at the variational mean"""
    eta, _ = from_unconstrained(transform, q.mean)
    return SimplexWeights.normalized(eta[0])


def offsets_at_mean(q, transform):
    """Residual offsets μ_k at the variational mean, (K, c); None when they are not latent"""
    kinds = [kind for kind, _ in transform.blocks]
    if "identity" not in kinds:
        return None
    K = transform.blocks[0][1]
    eta, _ = from_unconstrained(transform, q.mean)
    return np.stack(eta[1:K + 1])


def posterior_mean_weights(q, transform, rng, n_draws=2000):
    """Monte-Carlo E_q[w] for the leading simplex block"""
    draws = q.draw(rng.generator.standard_normal((n_draws, q.dim)))
    K = transform.blocks[0][1]
    full = np.hstack([draws[:, :K - 1], np.zeros((n_draws, 1))])
    w = special.softmax(full, axis=1).mean(axis=0)
    return SimplexWeights.normalized(w)


def vbtta_log_joint(calibration, means, variances, prior, latents="all"):
    """
    Build (transform, log_joint, init) for the augmentation-weight model.

    latents="all" covers w, every μ_k and every Λ_k; latents="weights" holds μ_k
    and Λ_k at the starting values of the coordinate-ascent fit. The
    likelihood is the component-marginalized mixture over calibration residuals.
    """
    if latents not in ("all", "weights"):
        raise DomainError(f"latents must be 'all' or 'weights', got '{latents}'")
    c = prior.c
    means = np.asarray(means, dtype=float)
    K = means.shape[1]
    if K < 2:
        raise DomainError("ADVI over mixture weights needs at least two components")
    R, _ = stack_residuals(calibration, means, c)
    start, _, _ = initial_state(calibration, means, variances, prior)
    fixed_mu = [g.mean for g in start.gaussians]
    fixed_prec = [w.expectations()[0] for w in start.wisharts]
    log_simplex_density = float(special.gammaln(K))
    prior_normalizer = wishart_log_normalizer(prior.nu, prior.V)

    def mixture_loglik(w, mus, precs):
        log_terms = np.empty((R.shape[0], K))
        for k in range(K):
            diff = R[:, k, :] - mus[k]
            sign, logdet = np.linalg.slogdet(precs[k])
            quad = np.einsum("li,ij,lj->l", diff, precs[k], diff)
            with np.errstate(divide="ignore"):
                log_w = np.log(w[k])
            log_terms[:, k] = log_w + 0.5 * logdet - 0.5 * c * LOG_2PI - 0.5 * quad
        return float(np.sum(special.logsumexp(log_terms, axis=1)))

    if latents == "weights":
        transform = TransformSpec((("simplex", K),))

        def log_joint(eta):
            return log_simplex_density + mixture_loglik(eta[0], fixed_mu, fixed_prec)

        init_eta = [np.full(K, 1.0 / K)]
    else:
        blocks = [("simplex", K)] + [("identity", c)] * K + [("positive_definite", c)] * K
        transform = TransformSpec(tuple(blocks))

        def log_joint(eta):
            w, mus, precs = eta[0], eta[1:K + 1], eta[K + 1:]
            total = log_simplex_density + mixture_loglik(w, mus, precs)
            for mu, prec in zip(mus, precs):
                total += 0.5 * c * math.log(prior.beta / (2.0 * math.pi)) - 0.5 * prior.beta * float(mu @ mu)
                _, logdet = np.linalg.slogdet(prec)
                total += prior_normalizer + 0.5 * (prior.nu - c - 1) * logdet - 0.5 * np.trace(prior.V @ prec)
            return total

        init_eta = [np.full(K, 1.0 / K)] + fixed_mu + fixed_prec
    init = FullRankGaussian(to_unconstrained(transform, init_eta), 0.1 * np.eye(transform.dim))
    return transform, log_joint, init
