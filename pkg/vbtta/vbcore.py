"""
Variational Bayes over augmentation mixture weights.

Every calibration label is modelled as coming from one of K augmentation
components. For the continuous case the component is Gaussian around the
component's predictive mean with a per-component offset μ_k ~ N(0, β⁻¹I) and
precision Λ_k ~ W(ν, V) (rate convention); the factors Q_μ, Q_Σ are shared
across instances, responsibilities are per label. The mixture weights w are a
point estimate updated by an M-step. The categorical case uses fixed
multinomial-probit class probabilities per component and plain EM on w.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from vbtta.augment import augment_batch, spec_stream
from vbtta.errors import DegenerateInputError, DomainError, NumericalError
from vbtta.mathstats import (
    LOG_2PI, adaptive_quadrature, check_spd, logdet_spd,
    wishart_expectations, wishart_log_normalizer,
)
from vbtta.predictor import forward, softmax

logger = logging.getLogger(__name__)

SUM_TOL = 1e-12
EIGEN_FLOOR = 1e-12
PROBIT_TAIL = 12.0


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if w.ndim != 1 or w.shape[0] < 1:
            raise DomainError(f"weights must be a non-empty vector, got shape {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > SUM_TOL:
            raise DomainError(f"weights must be non-negative and sum to 1, got {w}")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, K):
        return cls(np.full(K, 1.0 / K))

    @classmethod
    def normalized(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(values / values.sum())

    def __len__(self):
        return self.w.shape[0]


@dataclass(frozen=True, eq=False)
class LabelSet:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 0:
            labels = labels[None]
        if labels.shape[0] < 1:
            raise DomainError("a label set needs at least one label")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class PriorConfig:
    beta: float = 1e-4
    nu: float = 1.0
    V: np.ndarray = field(default_factory=lambda: np.eye(1))

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        object.__setattr__(self, "V", V)
        if not self.beta > 0:
            raise DomainError(f"prior precision scale must be positive, got {self.beta}")
        if not self.nu > self.c - 1:
            raise DomainError(f"wishart degrees of freedom must exceed {self.c - 1}, got {self.nu}")
        check_spd(V, "prior wishart rate matrix")

    @property
    def c(self):
        return self.V.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianFactor:
    """Q(μ_k) = N(mean, precision⁻¹)"""
    mean: np.ndarray
    precision: np.ndarray

    @property
    def covariance(self):
        return np.linalg.inv(self.precision)

    def second_moment(self):
        return np.outer(self.mean, self.mean) + self.covariance


@dataclass(frozen=True, eq=False)
class WishartFactor:
    """Q(Λ_k) = W(nu, rate)"""
    nu: float
    rate: np.ndarray

    def expectations(self):
        return wishart_expectations(self.nu, self.rate)


@dataclass(eq=False)
class VariationalState:
    responsibilities: list
    gaussians: list
    wisharts: list

    @property
    def K(self):
        return len(self.gaussians)

    @property
    def offsets(self):
        """Posterior means of the residual offsets μ_k, shape (K, c)"""
        return np.stack([g.mean for g in self.gaussians])


@dataclass(frozen=True, eq=False)
class ProbitComponent:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if mu.shape != sigma.shape:
            raise DomainError(f"latent means {mu.shape} and scales {sigma.shape} differ in shape")
        if np.any(~(sigma > 0)):
            raise DomainError(f"latent scales must be positive, got {sigma}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_moments(cls, mean, variance):
        return cls(mean, np.sqrt(variance))

    @property
    def n_classes(self):
        return self.mu.shape[0]


@dataclass(frozen=True)
class FitConfig:
    max_steps: int = 300
    rel_tol: float = 1e-8
    init_weights: tuple = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise DomainError(f"max_steps must be at least 1, got {self.max_steps}")
        if self.rel_tol < 0:
            raise DomainError(f"rel_tol must be non-negative, got {self.rel_tol}")


@dataclass(eq=False)
class FitResult:
    weights: SimplexWeights
    state: VariationalState
    trace: list
    weight_trace: list
    # residual offsets in effect at the start of each step; empty for the categorical fit
    offset_trace: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.weights, self.state, self.trace))


def _as_rows(values, c):
    """Labels or means as an (n, c) float array"""
    arr = np.asarray(values, dtype=float)
    return arr.reshape(-1, c)


def stack_residuals(calibration, means, c):
    """
    Stack residuals r_lk = y_l − μ_k(x_i) for every label l of every instance i.

    calibration: sequence of label arrays; means: (n, K, c) or (n, K).
    Returns (R of shape (L, K, c), owner index of shape (L,)).
    """
    means = np.asarray(means, dtype=float)
    n = means.shape[0]
    means = means.reshape(n, means.shape[1], c)
    if len(calibration) != n:
        raise DomainError(f"{len(calibration)} label sets but moments for {n} instances")
    blocks, owners = [], []
    for i, labels in enumerate(calibration):
        labels = labels.labels if isinstance(labels, LabelSet) else labels
        y = _as_rows(labels, c)
        blocks.append(y[:, None, :] - means[i][None, :, :])
        owners.append(np.full(y.shape[0], i))
    if not blocks:
        return np.empty((0, means.shape[1], c)), np.empty(0, dtype=int)
    return np.concatenate(blocks), np.concatenate(owners)


def _log_responsibilities(R, weights, wisharts, gaussians):
    """Unnormalized ln p̃_lk, shape (L, K)"""
    L, K, c = R.shape
    out = np.empty((L, K))
    with np.errstate(divide="ignore"):
        log_w = np.log(weights.w)
    for k in range(K):
        E_prec, E_logdet = wisharts[k].expectations()
        diff = R[:, k, :] - gaussians[k].mean
        quad = np.einsum("li,ij,lj->l", diff, E_prec, diff)
        out[:, k] = (0.5 * E_logdet + log_w[k]
                     - 0.5 * quad - 0.5 * np.trace(E_prec @ gaussians[k].covariance))
    return out


def _normalize_log(log_p):
    norm = special.logsumexp(log_p, axis=1, keepdims=True)
    if np.any(~np.isfinite(norm)):
        raise NumericalError("every component has zero responsibility for some label", term="responsibilities")
    return np.exp(log_p - norm)


def responsibilities_continuous(means, labels, weights, wisharts, gaussians):
    """
    p_jk for the labels of one instance, normalized in log space.

    means holds the component predictive means μ_k(x) with shape (K,) or (K, c).
    """
    c = wisharts[0].rate.shape[0]
    labels = labels.labels if isinstance(labels, LabelSet) else labels
    means = np.asarray(means, dtype=float).reshape(1, len(wisharts), c)
    R, _ = stack_residuals([labels], means, c)
    return _normalize_log(_log_responsibilities(R, weights, wisharts, gaussians))


def _sufficient_stats(R, p_k):
    """(Σ p, Σ p r, Σ p r rᵀ) for one component; R is (L, c), p_k is (L,)"""
    N = float(p_k.sum())
    s = p_k @ R
    S = np.einsum("l,li,lj->ij", p_k, R, R)
    return N, s, S


def update_gaussian_factor(prior, wishart_expect, labels, p_k):
    """
    G_k = βI + E[Λ_k] Σ p_jk, m_k = G_k⁻¹ E[Λ_k] Σ p_jk y_j.

    labels are the values the component explains (residuals in the fit loop).
    """
    c = prior.c
    R = _as_rows(labels, c)
    N, s, _ = _sufficient_stats(R, np.asarray(p_k, dtype=float))
    E_prec = np.atleast_2d(wishart_expect)
    G = prior.beta * np.eye(c) + E_prec * N
    m = np.linalg.solve(G, E_prec @ s)
    return GaussianFactor(mean=m, precision=G)


def _floor_spd(matrix):
    matrix = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(matrix)
    if np.all(vals >= EIGEN_FLOOR):
        return matrix
    vals = np.maximum(vals, EIGEN_FLOOR)
    return (vecs * vals) @ vecs.T


def update_wishart_factor(prior, labels, p_k, gaussian):
    """ν_k = ν + Σ p, V_k = V + Σ p (y − μ)(y − μ)ᵀ in expectation under Q(μ_k)"""
    c = prior.c
    R = _as_rows(labels, c)
    N, s, S = _sufficient_stats(R, np.asarray(p_k, dtype=float))
    m = gaussian.mean
    V_k = prior.V + S - np.outer(m, s) - np.outer(s, m) + gaussian.second_moment() * N
    return WishartFactor(nu=prior.nu + N, rate=_floor_spd(V_k))


def elbo_terms(state, R, weights, prior):
    """The seven ELBO terms for stacked residuals R and per-label responsibilities"""
    P = np.concatenate(state.responsibilities) if state.responsibilities else np.empty((0, state.K))
    c = prior.c
    terms = dict.fromkeys(("J_S", "J_z", "J_mu", "J_Sigma", "Pi_z", "Pi_mu", "Pi_Sigma"), 0.0)
    prior_normalizer = wishart_log_normalizer(prior.nu, prior.V)
    for k in range(state.K):
        gauss, wish = state.gaussians[k], state.wisharts[k]
        E_prec, E_logdet = wish.expectations()
        cov = gauss.covariance
        p_k = P[:, k]
        if R.shape[0]:
            diff = R[:, k, :] - gauss.mean
            quad = np.einsum("li,ij,lj->l", diff, E_prec, diff) + np.trace(E_prec @ cov)
            terms["J_S"] += float(p_k @ (0.5 * E_logdet - 0.5 * c * LOG_2PI - 0.5 * quad))
            terms["J_z"] += float(np.sum(special.xlogy(p_k, weights.w[k])))
        terms["J_mu"] += 0.5 * c * math.log(prior.beta / (2.0 * math.pi)) - 0.5 * prior.beta * np.trace(gauss.second_moment())
        terms["J_Sigma"] += (prior_normalizer + 0.5 * (prior.nu - c - 1) * E_logdet
                             - 0.5 * np.trace(prior.V @ E_prec))
        terms["Pi_mu"] += -0.5 * c * (1.0 + LOG_2PI) + 0.5 * logdet_spd(gauss.precision)
        terms["Pi_Sigma"] += (wishart_log_normalizer(wish.nu, wish.rate) + 0.5 * (wish.nu - c - 1) * E_logdet
                              - 0.5 * wish.nu * c)
    terms["Pi_z"] = float(np.sum(special.xlogy(P, P)))
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NumericalError(f"ELBO term {name} is {value}", term=name)
    return terms


def elbo_continuous(state, calibration, weights, prior, means):
    """L(Q) = J_S + J_z + J_μ + J_Σ − Π_z − Π_μ − Π_Σ"""
    R, _ = stack_residuals(calibration, means, prior.c)
    t = elbo_terms(state, R, weights, prior)
    return t["J_S"] + t["J_z"] + t["J_mu"] + t["J_Sigma"] - t["Pi_z"] - t["Pi_mu"] - t["Pi_Sigma"]


def mstep_weights(responsibilities):
    """w_k ∝ Σ_{i,j} p_jk over every responsibility matrix given"""
    if isinstance(responsibilities, np.ndarray):
        responsibilities = [responsibilities]
    mass = np.sum([np.asarray(p, dtype=float).sum(axis=0) for p in responsibilities], axis=0)
    total = float(np.sum(mass))
    if not total > 0:
        raise DegenerateInputError("responsibilities carry no mass")
    w = mass / total
    w = w / w.sum()
    return SimplexWeights(w)


def _split_by_owner(P, owners, n):
    bounds = np.searchsorted(owners, np.arange(n + 1))
    return [P[bounds[i]:bounds[i + 1]] for i in range(n)]


def initial_state(calibration, means, variances, prior):
    """
    Responsibilities from the moment Gaussians under uniform weights, Wishart
    factors whose mean precision is the inverse average moment variance, and the
    prior Gaussian factors.
    """
    c = prior.c
    means = np.asarray(means, dtype=float)
    n, K = means.shape[0], means.shape[1]
    variances = np.asarray(variances, dtype=float).reshape(n, K, c)
    R, owners = stack_residuals(calibration, means, c)
    var_rows = variances[owners]
    log_p = -0.5 * np.sum(np.log(var_rows) + R ** 2 / var_rows, axis=2)
    P = _normalize_log(log_p) if R.shape[0] else np.empty((0, K))
    gaussians, wisharts = [], []
    for k in range(K):
        mean_var = variances[:, k, :].mean(axis=0)
        nu_k = prior.nu + 1.0
        gaussians.append(GaussianFactor(mean=np.zeros(c), precision=prior.beta * np.eye(c)))
        wisharts.append(WishartFactor(nu=nu_k, rate=nu_k * np.diag(mean_var)))
    return VariationalState(_split_by_owner(P, owners, n), gaussians, wisharts), R, owners


def fit_continuous(calibration, means, variances, prior, fit_config=None):
    """
    CAVI over (Q_μ, Q_Σ, Q_z) alternated with the M-step for w.

    Each step updates Q_μ, Q_Σ, Q_z then w. trace holds the ELBO after each
    step, weight_trace the weights and offset_trace the offset means in effect
    at the start of each step.
    """
    fit_config = fit_config or FitConfig()
    means = np.asarray(means, dtype=float)
    n, K = means.shape[0], means.shape[1]
    if K < 1:
        raise DomainError("need at least one augmentation component")
    if n < 1:
        raise DegenerateInputError("calibration set is empty")
    state, R, owners = initial_state(calibration, means, variances, prior)
    weights = (SimplexWeights.normalized(fit_config.init_weights) if fit_config.init_weights is not None
               else SimplexWeights.uniform(K))
    trace, weight_trace, offset_trace = [], [], []
    logger.info(f"CAVI fit on {R.shape[0]} labels from {n} instances, K={K}")

    for step in range(fit_config.max_steps):
        weight_trace.append(weights.w.copy())
        offset_trace.append(state.offsets.copy())
        P = np.concatenate(state.responsibilities)
        for k in range(K):
            E_prec, _ = state.wisharts[k].expectations()
            state.gaussians[k] = update_gaussian_factor(prior, E_prec, R[:, k, :], P[:, k])
            state.wisharts[k] = update_wishart_factor(prior, R[:, k, :], P[:, k], state.gaussians[k])
        P = _normalize_log(_log_responsibilities(R, weights, state.wisharts, state.gaussians))
        state.responsibilities = _split_by_owner(P, owners, n)
        weights = mstep_weights(P)
        value = elbo_continuous(state, calibration, weights, prior, means)
        logger.debug(f"step {step + 1}: ELBO {value:.10g}")
        if trace and value < trace[-1] - 1e-8 * abs(trace[-1]):
            logger.warning(f"ELBO decreased from {trace[-1]:.10g} to {value:.10g} at step {step + 1}")
        trace.append(value)
        if len(trace) > 1 and trace[-1] - trace[-2] < fit_config.rel_tol * abs(trace[-2]):
            logger.info(f"ELBO converged after {step + 1} steps")
            break
    logger.info(f"CAVI fit finished: weights {np.round(weights.w, 4)}")
    return FitResult(weights, state, trace, weight_trace, offset_trace)


def _probit_integrand(component):
    mu, sigma = component.mu, component.sigma
    C = mu.shape[0]
    off_diagonal = ~np.eye(C, dtype=bool)

    def integrand(v):
        u = (v - mu) / sigma
        log_cdf = special.log_ndtr(u)
        log_dens = -0.5 * u * u - 0.5 * LOG_2PI - np.log(sigma)
        total = log_cdf.sum()
        # entry (i, j): φ(u_i)/σ_i ∏_{l≠i,j} Φ(u_l)
        with np.errstate(over="ignore"):
            terms = np.exp(log_dens[:, None] + total - log_cdf[:, None] - log_cdf[None, :])
        others_max_density = np.where(off_diagonal, terms, 0.0).sum(axis=0)
        return special.ndtr(-u) * others_max_density

    return integrand


def probit_class_probabilities(component, tol=1e-9):
    """
    P(Y=j) for every class j, integrated in one vector-valued quadrature.

    Raises ConvergenceError when a panel misses its share of tol.
    """
    if component.n_classes < 2:
        raise DomainError(f"probit model needs at least 2 classes, got {component.n_classes}")
    integrand = _probit_integrand(component)
    lo = float(np.min(component.mu - PROBIT_TAIL * component.sigma))
    hi = float(np.max(component.mu + PROBIT_TAIL * component.sigma))
    total = np.zeros(component.n_classes)
    for lower, upper in ((-math.inf, lo), (lo, hi), (hi, math.inf)):
        total = total + adaptive_quadrature(integrand, lower, upper, tol=tol / 3.0, strict=True).value
    return np.clip(total, 0.0, 1.0)


def probit_class_probability(component, j, tol=1e-9):
    if not 0 <= j < component.n_classes:
        raise DomainError(f"class {j} out of range for {component.n_classes} classes")
    return float(probit_class_probabilities(component, tol)[j])


def component_class_probabilities(means, variances, tol=1e-9):
    """(n, K, C) class probabilities from per-class score moments of shape (n, K, C)"""
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    probs = np.empty_like(means)
    for i in range(means.shape[0]):
        for k in range(means.shape[1]):
            probs[i, k] = probit_class_probabilities(ProbitComponent.from_moments(means[i, k], variances[i, k]), tol)
    return probs


def mixture_log_likelihood(likelihoods, weights):
    return float(np.sum(np.log(likelihoods @ weights.w)))


def fit_categorical(calibration, class_probs, fit_config=None):
    """
    EM on ∏_j Σ_k w_k P_k(Y = y_j) with fixed component class probabilities.

    class_probs has shape (n, K, C). trace holds the log-likelihood after each
    step, weight_trace the weights in effect at the start of each step.
    """
    fit_config = fit_config or FitConfig()
    class_probs = np.asarray(class_probs, dtype=float)
    n, K, _ = class_probs.shape
    if len(calibration) != n:
        raise DomainError(f"{len(calibration)} label sets but class probabilities for {n} instances")
    rows = []
    for i, labels in enumerate(calibration):
        labels = labels.labels if isinstance(labels, LabelSet) else labels
        y = np.atleast_1d(np.asarray(labels, dtype=int))
        rows.append(class_probs[i][:, y].T)
    likelihoods = np.concatenate(rows)
    if np.any(likelihoods.sum(axis=1) <= 0):
        raise DegenerateInputError("a label has zero probability under every component")

    weights = (SimplexWeights.normalized(fit_config.init_weights) if fit_config.init_weights is not None
               else SimplexWeights.uniform(K))
    trace, weight_trace = [], []
    logger.info(f"EM fit on {likelihoods.shape[0]} labels from {n} instances, K={K}")
    for step in range(fit_config.max_steps):
        weight_trace.append(weights.w.copy())
        joint = likelihoods * weights.w
        P = joint / joint.sum(axis=1, keepdims=True)
        weights = mstep_weights(P)
        value = mixture_log_likelihood(likelihoods, weights)
        logger.debug(f"step {step + 1}: log-likelihood {value:.10g}")
        trace.append(value)
        if len(trace) > 1 and trace[-1] - trace[-2] < fit_config.rel_tol * abs(trace[-2]):
            logger.info(f"log-likelihood converged after {step + 1} steps")
            break
    return FitResult(weights, None, trace, weight_trace)


def augmented_predictions(model, X, specs, n_samples, rng, pool=None):
    """
    Mean model output per instance and augmentation, shape (n, K, out).

    For a scores head the averaged quantity is the softmax probability vector.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    table = np.empty((n, len(specs), model.output_dim))
    for k, spec in enumerate(specs):
        batch = augment_batch(spec, X, n_samples, spec_stream(rng, spec), pool=pool)
        out = forward(model, batch.reshape(n * n_samples, -1))
        if model.head == "scores":
            out = softmax(out)
        table[:, k] = out.reshape(n, n_samples, -1).mean(axis=1)
    return table


def combine_predictions(table, weights, head, offsets=None):
    """
    Weighted mix of an augmented prediction table.

    offsets (K, out) are the fitted residual offsets; a regression prediction is
    shifted back by Σ_k w_k μ_k. They have no meaning for a scores head.
    """
    w = weights.w if isinstance(weights, SimplexWeights) else np.asarray(weights, dtype=float)
    if table.shape[1] != w.shape[0]:
        raise DomainError(f"{table.shape[1]} augmentations but {w.shape[0]} weights")
    mixed = np.einsum("nko,k->no", table, w)
    if offsets is not None:
        if head == "scores":
            raise DomainError("residual offsets only apply to a regression head")
        offsets = np.asarray(offsets, dtype=float).reshape(w.shape[0], -1)
        mixed = mixed + w @ offsets
    if head == "scores":
        return np.argmax(mixed, axis=1)
    return mixed[:, 0]


def predict_weighted(model, x, specs, weights, n_samples, rng, pool=None, offsets=None):
    """Σ_k w_k · (mean f(φ_k(x)) + μ_k); the arg-max class of the mixed softmax for a scores head"""
    if len(specs) != len(weights):
        raise DomainError(f"{len(specs)} augmentations but {len(weights)} weights")
    x = np.asarray(x, dtype=float)
    table = augmented_predictions(model, x[None, :], specs, n_samples, rng, pool=pool)
    return combine_predictions(table, weights, model.head, offsets)[0]
