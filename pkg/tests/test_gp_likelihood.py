"""Log marginal likelihood values, analytic gradients, and joint sums."""

import numpy as np
import pytest

from conflictcast.data_model import Timeline
from conflictcast.gp_engine import (
    GPModel,
    KernelSpec,
    gram_matrix,
    joint_lml,
    log_marginal_likelihood,
)


def dense_lml(model, x, y):
    """Direct evaluation of the Gaussian evidence for cross-checking."""
    k = gram_matrix(model, x)
    n = len(y)
    sign, logdet = np.linalg.slogdet(k)
    assert sign > 0
    return -0.5 * y @ np.linalg.solve(k, y) - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi)


def random_model(rng, n_components):
    kinds = ["se", "matern32"]
    comps = tuple(
        KernelSpec(kinds[int(rng.integers(2))], float(rng.uniform(0.5, 30.0)),
                   float(rng.uniform(0.2, 2.0)))
        for _ in range(n_components)
    )
    return GPModel(comps, float(rng.uniform(0.05, 1.0)))


def test_lml_matches_dense_formula():
    rng = np.random.default_rng(23)
    for trial in range(25):
        model = random_model(rng, int(rng.integers(1, 3)))
        n = int(rng.integers(5, 25))
        x = np.sort(rng.uniform(0, 50, size=n))
        y = rng.normal(size=n)
        value, _ = log_marginal_likelihood(model, x, y)
        assert value == pytest.approx(dense_lml(model, x, y), rel=1e-9)


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(31)
    h = 1e-5
    worst = 0.0
    for trial in range(30):
        model = random_model(rng, int(rng.integers(1, 3)))
        x = np.sort(rng.uniform(0, 40, size=15))
        y = rng.normal(size=15)
        _, grad = log_marginal_likelihood(model, x, y)
        theta = model.log_params()
        for j in range(model.n_params):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            fp, _ = log_marginal_likelihood(model.with_log_params(tp), x, y)
            fm, _ = log_marginal_likelihood(model.with_log_params(tm), x, y)
            fd = (fp - fm) / (2 * h)
            scale = max(abs(fd), abs(grad[j]), 1e-8)
            worst = max(worst, abs(grad[j] - fd) / scale)
    assert worst < 1e-4


def test_joint_lml_equals_per_problem_sum():
    rng = np.random.default_rng(41)
    model = random_model(rng, 2)
    problems = []
    # mix shared and distinct input grids to exercise the grouping path
    shared = np.arange(20.0)
    for i in range(6):
        x = shared if i % 2 == 0 else np.sort(rng.uniform(0, 30, size=12))
        problems.append((x, rng.normal(size=len(x))))
    total, grad = joint_lml(model, problems)
    parts = [log_marginal_likelihood(model, x, y) for x, y in problems]
    assert total == pytest.approx(sum(v for v, _ in parts), rel=1e-12)
    assert np.allclose(grad, np.sum([g for _, g in parts], axis=0), rtol=1e-9)


def test_joint_lml_accepts_timelines():
    rng = np.random.default_rng(43)
    model = random_model(rng, 1)
    tls = [
        Timeline(i, np.arange(15), np.abs(rng.normal(size=15)))
        for i in range(3)
    ]
    v_tl, g_tl = joint_lml(model, tls)
    v_xy, g_xy = joint_lml(model, [(t.months, t.values) for t in tls])
    assert v_tl == pytest.approx(v_xy, rel=1e-14)
    assert np.allclose(g_tl, g_xy)


def test_joint_lml_rejects_empty_and_bad_targets():
    model = GPModel((KernelSpec("se", 1.0, 1.0),), 0.5)
    with pytest.raises(ValueError):
        joint_lml(model, [])
    with pytest.raises(ValueError):
        log_marginal_likelihood(model, np.arange(3.0), np.array([0.0, np.nan, 1.0]))


def test_more_data_changes_lml_monotone_scale():
    # additive sanity: identical independent problems double the evidence
    model = GPModel((KernelSpec("se", 4.0, 1.0),), 0.3)
    x = np.arange(10.0)
    y = np.sin(x / 3.0)
    single, _ = log_marginal_likelihood(model, x, y)
    double, _ = joint_lml(model, [(x, y), (x, y)])
    assert double == pytest.approx(2 * single, rel=1e-12)
