"""Kernel evaluation, distance geometry, and Gram-matrix conditioning."""

import numpy as np
import pytest

from conflictcast.gp_engine import (
    GPModel,
    KernelSpec,
    gram_matrix,
    kernel_eval,
    pairwise_distances,
    _chol_noisy,
)

SE_AT_ONE = 0.6065306597126334  # exp(-1/2)
MATERN_AT_ONE = 0.4833577245965077  # (1 + sqrt(3)) exp(-sqrt(3))


def test_kernel_values_at_unit_separation():
    se = KernelSpec("se", 1.0, 1.0)
    m32 = KernelSpec("matern32", 1.0, 1.0)
    assert kernel_eval(se, 1.0) == pytest.approx(SE_AT_ONE, abs=1e-12)
    assert kernel_eval(m32, 1.0) == pytest.approx(MATERN_AT_ONE, abs=1e-12)


def test_kernel_zero_distance_gives_variance():
    for kind in ("se", "matern32"):
        spec = KernelSpec(kind, 3.0, 2.5)
        assert kernel_eval(spec, 0.0) == pytest.approx(2.5**2)


def test_kernel_amplitude_scaling_and_monotone_decay():
    d = np.linspace(0.0, 20.0, 200)
    for kind in ("se", "matern32"):
        base = kernel_eval(KernelSpec(kind, 2.0, 1.0), d)
        scaled = kernel_eval(KernelSpec(kind, 2.0, 3.0), d)
        assert np.allclose(scaled, 9.0 * base)
        assert np.all(np.diff(base) < 0)
        assert np.all(base > 0)


def test_matern_has_heavier_tail_than_se():
    spec_se = KernelSpec("se", 1.0, 1.0)
    spec_m = KernelSpec("matern32", 1.0, 1.0)
    for d in (3.0, 5.0, 8.0):
        assert kernel_eval(spec_m, d) > kernel_eval(spec_se, d)


def test_kernel_rejects_negative_distance_and_bad_params():
    spec = KernelSpec("se", 1.0, 1.0)
    with pytest.raises(ValueError):
        kernel_eval(spec, -0.1)
    with pytest.raises(ValueError):
        KernelSpec("cubic", 1.0, 1.0)
    with pytest.raises(ValueError):
        KernelSpec("se", 0.0, 1.0)
    with pytest.raises(ValueError):
        KernelSpec("se", 1.0, -2.0)


def test_pairwise_distances_match_brute_force():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(12, 2))
    z = rng.normal(size=(7, 2))
    d = pairwise_distances(x, z)
    for i in range(12):
        for j in range(7):
            assert d[i, j] == pytest.approx(np.linalg.norm(x[i] - z[j]), abs=1e-12)
    # 1-d inputs promote to a column
    t = rng.normal(size=9)
    dt = pairwise_distances(t)
    assert dt.shape == (9, 9)
    assert np.allclose(dt, np.abs(t[:, None] - t[None, :]))


def test_gram_matrix_symmetric_with_noise_on_diagonal():
    rng = np.random.default_rng(7)
    x = rng.normal(size=14)
    model = GPModel(
        (KernelSpec("se", 5.0, 1.2), KernelSpec("matern32", 1.0, 0.5)), 0.3
    )
    k_core = gram_matrix(model, x, include_noise=False)
    k_noisy = gram_matrix(model, x)
    assert np.allclose(k_core, k_core.T)
    assert np.allclose(k_noisy - k_core, 0.3**2 * np.eye(14))
    # diagonal is the summed signal variance
    assert np.allclose(np.diag(k_core), model.signal_variance)


def test_random_gram_matrices_factor_with_jitter():
    rng = np.random.default_rng(19)
    for trial in range(100):
        n = int(rng.integers(3, 30))
        kinds = ["se", "matern32"]
        comps = tuple(
            KernelSpec(kinds[int(rng.integers(2))], float(rng.uniform(0.1, 50.0)),
                       float(rng.uniform(0.05, 3.0)))
            for _ in range(int(rng.integers(1, 3)))
        )
        model = GPModel(comps, float(rng.uniform(1e-4, 1.0)))
        # duplicated inputs make the core Gram rank-deficient on purpose
        x = np.repeat(rng.normal(scale=10.0, size=(n + 1) // 2), 2)[:n]
        chol, _ = _chol_noisy(model, gram_matrix(model, x, include_noise=False))
        assert np.all(np.isfinite(chol))


def test_model_log_param_round_trip():
    model = GPModel(
        (KernelSpec("se", 100.0, 0.5), KernelSpec("matern32", 5.0, 0.3)), 0.5
    )
    theta = model.log_params()
    assert theta.shape == (5,)
    back = model.with_log_params(theta)
    for got, want in zip(back.components, model.components):
        assert got.kind == want.kind
        assert got.lengthscale == pytest.approx(want.lengthscale, rel=1e-12)
        assert got.amplitude == pytest.approx(want.amplitude, rel=1e-12)
    assert back.noise == pytest.approx(model.noise, rel=1e-12)
    with pytest.raises(ValueError):
        model.with_log_params(theta[:-1])


def test_model_validation():
    with pytest.raises(ValueError):
        GPModel((), 0.5)
    comp = KernelSpec("se", 1.0, 1.0)
    with pytest.raises(ValueError):
        GPModel((comp, comp, comp), 0.5)
    with pytest.raises(ValueError):
        GPModel((comp,), 0.0)
