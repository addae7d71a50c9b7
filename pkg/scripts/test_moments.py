import numpy as np
import pytest

from vbtta.augment import AugmentationSpec, ReferencePool, induced_distribution_sample
from vbtta.errors import DegenerateInputError, DomainError
from vbtta.mathstats import Rng
from vbtta import moments
from vbtta.moments import (
    NoiseConfig, clear_covariance_cache, delta_method_moments, input_covariance, mc_moments, moments_table,
)
from conftest import QuadraticModel, linear_model


@pytest.fixture(autouse=True)
def fresh_cache():
    clear_covariance_cache()
    yield
    clear_covariance_cache()


def test_delta_method_for_linear_model_under_gaussian_noise():
    model = linear_model([1.0, 2.0])
    noise = NoiseConfig(sigma_eps=0.01)
    m = delta_method_moments(model, np.array([0.5, 0.5]), AugmentationSpec.gaussian_noise(0.1), noise)
    assert m.provenance == "delta"
    assert m.mean[0] == pytest.approx(1.5)
    assert m.variance[0] == pytest.approx(0.01 * 5.0 + 0.01, rel=1e-12)


def test_n_aug_divides_the_spread():
    model = linear_model([1.0, 2.0])
    spec = AugmentationSpec.gaussian_noise(0.1)
    m = delta_method_moments(model, np.zeros(2), spec, NoiseConfig(sigma_eps=0.01, n_aug=5))
    assert m.variance[0] == pytest.approx(0.05 / 5 + 0.01)


def test_delta_method_misses_curvature_that_sampling_sees():
    model = QuadraticModel()
    spec = AugmentationSpec.gaussian_noise(1.0)
    noise = NoiseConfig(sigma_eps=1e-6)
    delta = delta_method_moments(model, np.zeros(2), spec, noise)
    mc = mc_moments(model, np.zeros(2), spec, 20_000, noise, Rng(8))
    assert delta.variance[0] == pytest.approx(1e-6)
    # ‖x‖² with x ~ N(0, I₂) is χ²₂: mean 2, variance 4
    assert mc.mean[0] == pytest.approx(2.0, rel=0.05)
    assert mc.variance[0] == pytest.approx(4.0, rel=0.1)


def test_mixup_covariance_is_estimated_and_cached():
    pool = ReferencePool(Rng(1).generator.standard_normal((40, 2)))
    spec = AugmentationSpec.mixup(0.5)
    x = np.array([0.2, -0.1])
    first = input_covariance(spec, x, pool)
    first[0, 0] = 99.0
    second = input_covariance(spec, x, pool)
    assert second[0, 0] != 99.0
    assert np.allclose(second, second.T)
    assert np.all(np.linalg.eigvalsh(second) > 0)


@pytest.mark.parametrize("alpha", [0.2, 0.5])
def test_mixup_covariance_matches_beta_moments(alpha):
    pool = ReferencePool(Rng(3).generator.standard_normal((2000, 2)) @ np.array([[1.0, 0.6], [0.0, 0.8]]))
    x = np.array([1.5, 1.0])
    # x + λ(x* - x): covariance E[λ²]·S + Var(λ)·(m - x)(m - x)ᵀ over the pool's own mean m and covariance S
    m = pool.instances.mean(axis=0)
    S = np.cov(pool.instances, rowvar=False, bias=True)
    second_moment = (alpha + 1.0) / (2.0 * (2.0 * alpha + 1.0))
    lam_variance = 1.0 / (4.0 * (2.0 * alpha + 1.0))
    expected = second_moment * S + lam_variance * np.outer(m - x, m - x)

    estimated = input_covariance(AugmentationSpec.mixup(alpha), x, pool)
    draws = induced_distribution_sample(AugmentationSpec.mixup(alpha), x, moments.COVARIANCE_SAMPLES, Rng(5), pool=pool)
    centered = draws - draws.mean(axis=0)
    products = centered[:, :, None] * centered[:, None, :]
    standard_error = products.std(axis=0) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(estimated - expected) <= 4.0 * standard_error)


def test_covariance_cache_keeps_only_recent_entries(monkeypatch):
    monkeypatch.setattr(moments, "COVARIANCE_CACHE_SIZE", 3)
    monkeypatch.setattr(moments, "COVARIANCE_SAMPLES", 200)
    pool = ReferencePool(Rng(1).generator.standard_normal((40, 2)))
    spec = AugmentationSpec.cutmix(0.5)
    for i in range(20):
        input_covariance(spec, np.array([0.1 * i, 0.0]), pool)
    assert len(moments._covariance_cache) == 3
    latest = input_covariance(spec, np.array([1.9, 0.0]), pool)
    assert len(moments._covariance_cache) == 3
    assert np.allclose(latest, moments._covariance_cache[next(reversed(moments._covariance_cache))])


def test_zero_noise_is_degenerate():
    with pytest.raises(DegenerateInputError):
        input_covariance(AugmentationSpec.gaussian_noise(0.0), np.zeros(2))


def test_rotation_is_degenerate_for_delta_method():
    with pytest.raises(DegenerateInputError):
        input_covariance(AugmentationSpec.rotation(30.0), np.array([1.0, 0.0]))


def test_mc_moments_need_two_samples():
    with pytest.raises(DomainError):
        mc_moments(linear_model([1.0]), np.zeros(1), AugmentationSpec.gaussian_noise(0.1), 1, NoiseConfig(), Rng(0))


def test_noise_config_validation():
    with pytest.raises(DomainError):
        NoiseConfig(sigma_eps=0.0)
    with pytest.raises(DomainError):
        NoiseConfig(n_aug=0)


def test_moments_table_shapes_and_order_independence(tiny_model):
    X = Rng(3).generator.standard_normal((4, 3))
    pool = ReferencePool(Rng(4).generator.standard_normal((20, 3)))
    specs = [AugmentationSpec.gaussian_noise(0.1), AugmentationSpec.mixup(0.5)]
    noise = NoiseConfig()
    means, variances = moments_table(tiny_model, X, specs, noise, "monte_carlo", Rng(5), pool=pool, n_samples=16)
    assert means.shape == variances.shape == (4, 2, 1)
    assert np.all(variances >= noise.sigma_eps)
    swapped, _ = moments_table(tiny_model, X, specs[::-1], noise, "monte_carlo", Rng(5), pool=pool, n_samples=16)
    assert np.array_equal(swapped[:, ::-1], means)


def test_moments_table_delta_matches_forward(tiny_model):
    X = Rng(3).generator.standard_normal((3, 3))
    means, _ = moments_table(tiny_model, X, [AugmentationSpec.gaussian_noise(0.05)], NoiseConfig(), "delta", Rng(0))
    assert np.allclose(means[:, 0], tiny_model.forward(X))
    with pytest.raises(DomainError):
        moments_table(tiny_model, X, [AugmentationSpec.gaussian_noise(0.05)], NoiseConfig(), "exact", Rng(0))
