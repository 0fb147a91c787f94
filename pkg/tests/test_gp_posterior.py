"""Posterior prediction: decomposition, interpolation, sampling, persistence."""

import numpy as np
import pytest

from conflictcast.gp_engine import (
    GPModel,
    HyperPrior,
    KernelSpec,
    latent_sigma,
    load_model,
    posterior,
    posterior_many,
    sample_prior,
    save_model,
)


def random_two_trend(rng):
    return GPModel(
        (
            KernelSpec("se", float(rng.uniform(20.0, 150.0)), float(rng.uniform(0.3, 1.5))),
            KernelSpec("matern32", float(rng.uniform(1.0, 8.0)), float(rng.uniform(0.1, 0.8))),
        ),
        float(rng.uniform(0.1, 0.8)),
    )


def test_component_means_sum_to_full():
    rng = np.random.default_rng(53)
    for trial in range(20):
        model = random_two_trend(rng)
        n = int(rng.integers(10, 60))
        x = np.arange(float(n))
        y = rng.normal(size=n)
        x_star = np.arange(float(n + 15))
        post = posterior(model, x, y, x_star)
        total = sum(post.mu_components)
        scale = np.max(np.abs(post.mu_full)) + 1e-30
        assert np.max(np.abs(total - post.mu_full)) / scale < 1e-10


def test_posterior_interpolates_with_tiny_noise():
    # spacing >= one lengthscale keeps the Gram matrix well conditioned,
    # so the 1e-6 noise floor is the only smoothing left
    rng = np.random.default_rng(59)
    for trial in range(10):
        model = GPModel(
            (KernelSpec("se", float(rng.uniform(0.5, 1.5)), 1.0),), 1e-6
        )
        n = int(rng.integers(8, 30))
        x = np.sort(rng.choice(np.arange(0.0, 80.0, 2.0), size=n, replace=False))
        y = rng.normal(size=n)
        post = posterior(model, x, y, x)
        assert np.max(np.abs(post.mu_full - y)) < 1e-4 * np.max(np.abs(y))


def test_posterior_reverts_to_prior_far_from_data():
    model = GPModel((KernelSpec("se", 5.0, 1.0),), 0.2)
    x = np.arange(20.0)
    y = np.sin(x)
    far = np.array([500.0])
    post = posterior(model, x, y, far)
    assert abs(post.mu_full[0]) < 1e-8
    assert post.sigma_full[0] == pytest.approx(1.0, abs=1e-6)


def test_posterior_sigma_shrinks_at_data():
    model = GPModel((KernelSpec("matern32", 4.0, 1.0),), 0.1)
    x = np.arange(15.0)
    y = np.cos(x / 2)
    post = posterior(model, x, y, np.array([7.0, 200.0]))
    assert post.sigma_full[0] < 0.3
    assert post.sigma_full[1] > 0.9


def test_posterior_many_matches_per_row_calls():
    rng = np.random.default_rng(61)
    model = random_two_trend(rng)
    x = np.arange(25.0)
    x_star = np.arange(35.0)
    y_rows = rng.normal(size=(6, 25))
    mu_full, mu_comp, sigma = posterior_many(model, x, y_rows, x_star)
    assert mu_full.shape == (6, 35)
    assert mu_comp.shape == (2, 6, 35)
    for t in range(6):
        single = posterior(model, x, y_rows[t], x_star)
        assert np.allclose(mu_full[t], single.mu_full, atol=1e-12)
        assert np.allclose(mu_comp[0, t], single.mu_components[0], atol=1e-12)
        assert np.allclose(sigma, single.sigma_full, atol=1e-12)


def test_latent_sigma_ignores_targets():
    model = GPModel((KernelSpec("se", 6.0, 1.2),), 0.3)
    x = np.arange(18.0)
    x_star = np.arange(28.0)
    sigma = latent_sigma(model, x, x_star)
    rng = np.random.default_rng(67)
    post = posterior(model, x, rng.normal(size=18), x_star)
    assert np.allclose(sigma, post.sigma_full)


def test_adding_query_points_never_changes_existing_ones():
    rng = np.random.default_rng(71)
    model = random_two_trend(rng)
    x = np.arange(30.0)
    y = rng.normal(size=30)
    short = posterior(model, x, y, x)
    extended = posterior(model, x, y, np.arange(60.0))
    assert np.allclose(short.mu_full, extended.mu_full[:30], atol=1e-12)
    assert np.allclose(short.sigma_full, extended.sigma_full[:30], atol=1e-12)


def test_sample_prior_deterministic_and_covariance_shaped():
    model = GPModel((KernelSpec("se", 3.0, 1.0),), 0.05)
    x = np.arange(10.0)
    a = sample_prior(model, x, 42)
    b = sample_prior(model, x, 42)
    c = sample_prior(model, x, [42, 1])
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # nearby points move together under a long lengthscale
    draws = np.vstack([sample_prior(model, x, s) for s in range(400)])
    emp = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
    assert emp > 0.7


def test_model_save_load_round_trip(tmp_path):
    model = GPModel(
        (KernelSpec("se", 104.2, 0.57), KernelSpec("matern32", 3.9, 0.31)),
        0.44,
        {"iterations": 12, "joint_lml": -512.25},
    )
    path = tmp_path / "model.json"
    save_model(path, model, priors=HyperPrior.two_trend_default())
    back = load_model(path)
    assert back.components == model.components
    assert back.noise == model.noise
    assert back.meta["iterations"] == 12
    with pytest.raises(ValueError, match="format"):
        path2 = tmp_path / "junk.json"
        path2.write_text('{"something": 1}')
        load_model(path2)
