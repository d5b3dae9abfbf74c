import numpy as np
import pytest

from land_use_planner.numgrad import gradient_check
from land_use_planner.stages.condaug import ConditioningAugmentor, augment, kl_penalty


def test_zero_noise_returns_mean():
    augmentor = ConditioningAugmentor(4, hidden_dim=6, seed=1)
    z = np.array([0.3, -1.2, 0.0, 2.0])
    mu, _ = augmentor.distribution(z)
    np.testing.assert_array_equal(augment(z, np.zeros(4), augmentor), mu.numpy()[0])


def test_default_mean_head_is_identity():
    augmentor = ConditioningAugmentor(3)
    z = np.array([[0.5, -0.5, 1.5], [1.0, 2.0, 3.0]])
    np.testing.assert_allclose(augment(z, np.zeros_like(z), augmentor), z)


def test_noise_scales_with_sigma():
    augmentor = ConditioningAugmentor(3, seed=4)
    z = np.array([0.2, 0.1, -0.3])
    eps = np.array([1.0, -2.0, 0.5])
    sigma = augmentor.sigma(z).numpy()[0]
    np.testing.assert_allclose(augment(z, eps, augmentor) - augment(z, np.zeros(3), augmentor), sigma * eps)


def _force(augmentor: ConditioningAugmentor, mean_bias, logvar_bias) -> None:
    width = augmentor.width
    augmentor.w_mu.assign(np.zeros((width, width)))
    augmentor.b_mu.assign(np.asarray(mean_bias, dtype=float))
    augmentor.w_logvar.assign(np.zeros((width, width)))
    augmentor.b_logvar.assign(np.asarray(logvar_bias, dtype=float))


def test_kl_penalty_zero_for_standard_normal():
    augmentor = ConditioningAugmentor(3)
    _force(augmentor, np.zeros(3), np.zeros(3))
    assert kl_penalty(np.array([1.0, 2.0, 3.0]), augmentor) == pytest.approx(0.0)


def test_kl_penalty_unit_shift():
    augmentor = ConditioningAugmentor(2)
    _force(augmentor, [1.0, 0.0], [0.0, 0.0])
    assert kl_penalty(np.array([0.4, -0.7]), augmentor) == pytest.approx(0.5)


def test_kl_penalty_matches_closed_form(rng):
    augmentor = ConditioningAugmentor(5, hidden_dim=7, seed=3)
    for param in augmentor.params:
        param.assign(rng.normal(scale=0.5, size=param.shape))
    z = rng.normal(size=(4, 5))
    hidden = np.maximum(z @ augmentor.w_hidden.numpy() + augmentor.b_hidden.numpy(), 0.0)
    mu = hidden @ augmentor.w_mu.numpy() + augmentor.b_mu.numpy()
    logvar = hidden @ augmentor.w_logvar.numpy() + augmentor.b_logvar.numpy()
    expected = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - logvar - 1.0)
    assert kl_penalty(z, augmentor) == pytest.approx(expected, rel=1e-10)


def test_kl_gradient(rng):
    augmentor = ConditioningAugmentor(4, hidden_dim=5, seed=8)
    z = rng.normal(size=(2, 4))
    error = gradient_check(lambda: augmentor.kl_tensor(z), augmentor.params.parameters())
    assert error <= 1e-4


def test_augment_gradient(rng):
    augmentor = ConditioningAugmentor(4, seed=2)
    z = rng.normal(size=(3, 4))
    eps = rng.normal(size=(3, 4))
    error = gradient_check(lambda: augmentor.augment_tensor(z, eps).square().sum(),
                           augmentor.params.parameters())
    assert error <= 1e-4


def test_sample_variance_matches_sigma_squared(rng):
    augmentor = ConditioningAugmentor(6, hidden_dim=5, seed=9)
    augmentor.w_logvar.assign(rng.normal(scale=0.5, size=augmentor.w_logvar.shape))
    z = rng.normal(size=6)
    eps = rng.standard_normal((100_000, 6))
    samples = augment(np.broadcast_to(z, eps.shape).copy(), eps, augmentor)
    sigma = augmentor.sigma(z).numpy()[0]
    np.testing.assert_allclose(samples.var(axis=0), sigma ** 2, rtol=0.03)
    mu, _ = augmentor.distribution(z)
    np.testing.assert_allclose(samples.mean(axis=0), mu.numpy()[0], atol=4 * sigma.max() / np.sqrt(len(eps)) + 1e-12)
