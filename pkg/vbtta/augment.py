"""
Test-time augmentation operators, the distributions they induce around a fixed
input, and Mardia normality diagnostics for those distributions.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from vbtta.errors import ConfigurationError, DegenerateInputError, DomainError

logger = logging.getLogger(__name__)

KINDS = ("gaussian_noise", "rotation", "affine", "mixup", "cutmix")
POOLED_KINDS = ("mixup", "cutmix")
# who gets the larger share of a pooled mix: a symmetric Beta draw, or always the original
SHARES = ("symmetric", "minor")


@dataclass(frozen=True, eq=False)
class AugmentationSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown augmentation kind '{self.kind}'")
        p = self.params
        if self.kind == "gaussian_noise":
            sigma = np.asarray(p["sigma"], dtype=float)
            if np.any(sigma < 0):
                raise DomainError(f"noise scale must be non-negative, got {p['sigma']}")
        elif self.kind == "rotation":
            i, j = p["plane"]
            if i == j or i < 0 or j < 0:
                raise DomainError(f"rotation plane needs two distinct axes, got {p['plane']}")
        elif self.kind == "affine":
            A = np.atleast_2d(np.asarray(p["A"], dtype=float))
            b = np.atleast_1d(np.asarray(p["b"], dtype=float))
            if A.shape != (b.shape[0], b.shape[0]):
                raise DomainError(f"affine map needs a square A matching b, got {A.shape} and {b.shape}")
        else:
            alpha = p["alpha"]
            if not 0.0 < alpha < 1.0:
                raise DomainError(f"{self.kind} alpha must lie in (0, 1), got {alpha}")
            if p.get("share", "symmetric") not in SHARES:
                raise ConfigurationError(f"unknown {self.kind} share '{p['share']}', expected one of {SHARES}")

    @classmethod
    def gaussian_noise(cls, sigma):
        return cls("gaussian_noise", {"sigma": sigma})

    @classmethod
    def rotation(cls, angle, plane=(0, 1)):
        return cls("rotation", {"angle": float(angle), "plane": tuple(int(a) for a in plane)})

    @classmethod
    def affine(cls, A, b):
        return cls("affine", {"A": np.atleast_2d(np.asarray(A, dtype=float)),
                              "b": np.atleast_1d(np.asarray(b, dtype=float))})

    @classmethod
    def mixup(cls, alpha, share="symmetric"):
        return cls("mixup", {"alpha": float(alpha), "share": share})

    @classmethod
    def cutmix(cls, alpha, share="symmetric"):
        return cls("cutmix", {"alpha": float(alpha), "share": share})

    @property
    def share(self):
        return self.params.get("share", "symmetric") if self.needs_pool else None

    @property
    def needs_pool(self):
        return self.kind in POOLED_KINDS

    def canonical(self):
        """Stable text form used for cache keys, hashes and report labels"""
        p = self.params
        if self.kind == "gaussian_noise":
            sigma = np.atleast_1d(np.asarray(p["sigma"], dtype=float))
            return f"gaussian_noise({','.join(repr(float(s)) for s in sigma)})"
        if self.kind == "rotation":
            return f"rotation({p['angle']!r},{p['plane'][0]},{p['plane'][1]})"
        if self.kind == "affine":
            return f"affine({hashlib.sha256(p['A'].tobytes() + p['b'].tobytes()).hexdigest()[:12]})"
        if self.share == "minor":
            return f"{self.kind}({p['alpha']!r},minor)"
        return f"{self.kind}({p['alpha']!r})"

    def digest(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:12]

    def __repr__(self):
        return f"AugmentationSpec<{self.canonical()}>"


def spec_stream(rng, spec):
    """Child stream keyed by the augmentation itself, so list order does not matter"""
    return rng.split(int(spec.digest()[:8], 16))


def parse_augmentation(text):
    """Parse 'kind:param[:param...]' as written in experiment config files"""
    parts = [part.strip() for part in text.strip().split(":")]
    kind, args = parts[0], parts[1:]
    try:
        if kind == "gaussian_noise" and len(args) == 1:
            return AugmentationSpec.gaussian_noise(float(args[0]))
        if kind == "rotation" and len(args) in (1, 3):
            plane = (int(args[1]), int(args[2])) if len(args) == 3 else (0, 1)
            return AugmentationSpec.rotation(float(args[0]), plane)
        if kind in POOLED_KINDS and len(args) in (1, 2):
            share = args[1] if len(args) == 2 else "symmetric"
            return AugmentationSpec(kind, {"alpha": float(args[0]), "share": share})
    except ValueError as e:
        raise ConfigurationError(f"bad augmentation '{text}': {e}")
    raise ConfigurationError(f"cannot parse augmentation '{text}'")


@dataclass(frozen=True, eq=False)
class ReferencePool:
    instances: np.ndarray

    def __post_init__(self):
        instances = np.atleast_2d(np.asarray(self.instances, dtype=float))
        if instances.shape[0] < 1:
            raise DomainError("reference pool needs at least one instance")
        object.__setattr__(self, "instances", instances)

    @property
    def dim(self):
        return self.instances.shape[1]

    def draw(self, rng, size):
        idx = rng.generator.integers(0, self.instances.shape[0], size=size)
        return self.instances[idx]


def _check_inputs(spec, x, pool):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    if spec.needs_pool:
        if pool is None:
            raise ConfigurationError(f"{spec.kind} needs a reference pool")
        if pool.dim != d:
            raise DomainError(f"pool dimension {pool.dim} does not match input dimension {d}")
    if spec.kind == "rotation" and max(spec.params["plane"]) >= d:
        raise DomainError(f"rotation plane {spec.params['plane']} out of range for dimension {d}")
    if spec.kind == "affine" and spec.params["A"].shape[0] != d:
        raise DomainError(f"affine map of size {spec.params['A'].shape[0]} applied to dimension {d}")
    if spec.kind == "gaussian_noise":
        sigma = np.atleast_1d(np.asarray(spec.params["sigma"], dtype=float))
        if sigma.shape[0] not in (1, d):
            raise DomainError(f"noise scale of length {sigma.shape[0]} for dimension {d}")
    return x


def rotation_matrix(angle, plane, d):
    i, j = plane
    theta = math.radians(angle)
    R = np.eye(d)
    R[i, i] = math.cos(theta)
    R[j, j] = math.cos(theta)
    R[i, j] = -math.sin(theta)
    R[j, i] = math.sin(theta)
    return R


def augment_batch(spec, X, n, rng, pool=None, lam=None):
    """
    n augmented copies of every row of X: returns an array of shape (rows, n, d).

    lam forces the mixing coefficient (mixup) or every mask entry (cutmix); a
    forced value is used as given, whatever the share. Under the "minor" share the
    partner never contributes more than half of any coordinate.
    """
    X = np.atleast_2d(_check_inputs(spec, X, pool))
    rows, d = X.shape
    gen = rng.generator
    p = spec.params
    if spec.kind == "gaussian_noise":
        sigma = np.atleast_1d(np.asarray(p["sigma"], dtype=float))
        return X[:, None, :] + gen.standard_normal((rows, n, d)) * sigma
    if spec.kind == "rotation":
        R = rotation_matrix(p["angle"], p["plane"], d)
        return np.repeat((X @ R.T)[:, None, :], n, axis=1)
    if spec.kind == "affine":
        return np.repeat((X @ p["A"].T + p["b"])[:, None, :], n, axis=1)

    partners = pool.draw(rng, (rows, n))
    alpha = p["alpha"]
    if spec.kind == "mixup":
        if lam is None:
            lam_draw = gen.beta(alpha, alpha, size=(rows, n, 1))
            if spec.share == "minor":
                lam_draw = np.minimum(lam_draw, 1.0 - lam_draw)
        else:
            lam_draw = np.full((rows, n, 1), float(lam))
        return (1.0 - lam_draw) * X[:, None, :] + lam_draw * partners
    if lam is None:
        mask = gen.beta(alpha, alpha, size=(rows, n, d))
        if spec.share == "minor":
            mask = np.maximum(mask, 1.0 - mask)
    else:
        mask = np.full((rows, n, d), float(lam))
    return mask * X[:, None, :] + (1.0 - mask) * partners


def induced_distribution_sample(spec, x, n, rng, pool=None, lam=None):
    """n independent augmentations of the same fixed x, as an n×d matrix"""
    if n < 1:
        raise DomainError(f"sample count must be at least 1, got {n}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError(f"expected a single input vector, got shape {x.shape}")
    return augment_batch(spec, x[None, :], n, rng, pool=pool, lam=lam)[0]


def apply_augmentation(spec, x, rng, pool=None, lam=None):
    return induced_distribution_sample(spec, x, 1, rng, pool=pool, lam=lam)[0]


@dataclass(frozen=True)
class TestStatistic:
    statistic: float
    p_value: float
    raw: float


@dataclass(frozen=True)
class NormalityResult:
    skewness: TestStatistic
    kurtosis: TestStatistic


def normality_statistics(samples):
    """
    Mardia's multivariate skewness and kurtosis tests.

    Skewness uses n·b₁/6 against χ² with d(d+1)(d+2)/6 degrees of freedom,
    kurtosis the standardized b₂ against N(0, 1) (two-sided p-value).
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n <= d + 1:
        raise DegenerateInputError(f"need more than {d + 1} samples for dimension {d}, got {n}")
    centered = X - X.mean(axis=0)
    S = centered.T @ centered / n
    scale = np.max(np.abs(S))
    if not scale > 0 or np.linalg.cond(S) > 1e12:
        raise DegenerateInputError("sample covariance is singular")
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise DegenerateInputError("sample covariance is singular")
    Y = linalg.solve_triangular(chol, centered.T, lower=True).T

    third = np.einsum("ia,ib,ic->abc", Y, Y, Y, optimize=True)
    b1 = float(np.sum(third ** 2)) / n ** 2
    b2 = float(np.mean(np.sum(Y ** 2, axis=1) ** 2))

    skew_stat = n * b1 / 6.0
    skew_dof = d * (d + 1) * (d + 2) / 6.0
    kurt_stat = (b2 - d * (d + 2)) / math.sqrt(8.0 * d * (d + 2) / n)
    return NormalityResult(
        skewness=TestStatistic(skew_stat, float(stats.chi2.sf(skew_stat, skew_dof)), b1),
        kurtosis=TestStatistic(kurt_stat, float(2.0 * stats.norm.sf(abs(kurt_stat))), b2),
    )
