import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magmap.gp import (GpComponent, Hyperparameters, NotPositiveDefiniteError, OptimizerConfig, kernel,
                       kernel_matrix, nlml, optimize_hyperparameters, predict, stable_cholesky)


def test_kernel_zero_distance():
    hp = Hyperparameters(1.7, 0.4, 0.1)
    assert kernel(hp, [1, 2, 3], [1, 2, 3]) == pytest.approx(1.7 ** 2)


def test_kernel_half_value_distance():
    hp = Hyperparameters(2.0, 1.0, 0.1)
    d = np.sqrt(2 * np.log(2))
    assert kernel(hp, [0, 0, 0], [d, 0, 0]) == pytest.approx(2.0)


def test_kernel_decays_beyond_ten_length_scales():
    hp = Hyperparameters(3.0, 0.5, 0.1)
    assert kernel(hp, [0, 0, 0], [5.0, 0, 0]) <= 9.0 * np.exp(-50) * (1 + 1e-12)
    assert kernel(hp, [0, 0, 0], [5.5, 0, 0]) < 9.0 * np.exp(-50)


def test_kernel_literal_mode_adds_noise_everywhere():
    hp = Hyperparameters(2.0, 1.0, 0.3)
    a, b = np.array([0, 0, 0.0]), np.array([0.5, -0.2, 1.0])
    assert kernel(hp, a, b, noise_everywhere=True) == pytest.approx(kernel(hp, a, b) + 0.09)


def test_kernel_matrix_matches_pointwise_kernel(rng):
    hp = Hyperparameters(1.3, 0.7, 0.2)
    A, B = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    K = kernel_matrix(hp, A, B)
    expect = np.array([[kernel(hp, a, b) for b in B] for a in A])
    np.testing.assert_allclose(K, expect, rtol=1e-13)


@pytest.mark.parametrize("field", ["sigma_f", "length_scale", "sigma_n"])
@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan, np.inf])
def test_hyperparameters_must_be_positive(field, bad):
    kw = {"sigma_f": 1.0, "length_scale": 1.0, "sigma_n": 1.0, field: bad}
    with pytest.raises(ValueError):
        Hyperparameters(**kw)


def test_nlml_single_point():
    hp = Hyperparameters(1.5, 0.8, 0.4)
    v, _ = nlml(hp, [[0.1, 0.2, 0.3]], [0.0])
    assert v == pytest.approx(0.5 * np.log(1.5 ** 2 + 0.4 ** 2) + 0.5 * np.log(2 * np.pi))


def _fd_grad(hp, X, y, noise_everywhere=False, h=1e-5):
    g = np.empty(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fp, _ = nlml(Hyperparameters.from_log(hp.log + e), X, y, noise_everywhere=noise_everywhere)
        fm, _ = nlml(Hyperparameters.from_log(hp.log - e), X, y, noise_everywhere=noise_everywhere)
        g[j] = (fp - fm) / (2 * h)
    return g


@pytest.mark.parametrize("noise_everywhere", [False, True])
def test_nlml_gradient_matches_finite_differences(rng, noise_everywhere):
    for _ in range(10):
        X = rng.uniform(0, 2, size=(20, 3))
        y = rng.normal(size=20)
        hp = Hyperparameters(*np.exp(rng.uniform([-0.5, -1.0, -2.0], [1.0, 0.5, -0.5])))
        _, g = nlml(hp, X, y, noise_everywhere=noise_everywhere)
        fd = _fd_grad(hp, X, y, noise_everywhere)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_nlml_matches_dense_formula(rng):
    X = rng.uniform(0, 1, size=(15, 3))
    y = rng.normal(size=15)
    hp = Hyperparameters(1.2, 0.6, 0.3)
    K = kernel_matrix(hp, X) + 0.09 * np.eye(15)
    _, logdet = np.linalg.slogdet(K)
    expect = 0.5 * y @ np.linalg.solve(K, y) + 0.5 * logdet + 7.5 * np.log(2 * np.pi)
    v, _ = nlml(hp, X, y)
    assert v == pytest.approx(expect, rel=1e-12)


def test_stable_cholesky_escalates_jitter_on_duplicate_locations():
    hp = Hyperparameters(1.0, 1.0, 1e-4)
    X = np.array([[0.0, 0, 0], [0.0, 0, 0], [0.3, 0, 0]])
    K = kernel_matrix(hp, X)  # exactly singular without the noise term
    L, jitter = stable_cholesky(K, 1.0)
    assert jitter > 0
    np.testing.assert_allclose(L @ L.T, K + jitter * np.eye(3), atol=1e-12)


def test_stable_cholesky_gives_up_at_jitter_cap():
    with pytest.raises(NotPositiveDefiniteError):
        stable_cholesky(-np.eye(3), 1.0)


def test_predict_interpolates_with_tiny_noise(rng):
    X = rng.uniform(-1, 1, size=(8, 3))
    y = rng.normal(size=8)
    gp = GpComponent.fit(X, y, Hyperparameters(1.0, 0.5, 1e-7))
    mean, sd = gp.predict(X)
    np.testing.assert_allclose(mean, y, atol=1e-8)
    assert np.all(sd < 1e-5)


def test_single_point_posterior_closed_form():
    hp = Hyperparameters(2.0, 0.7, 0.5)
    r, y, off = np.array([[0.2, -0.1, -1.0]]), 3.0, 1.0
    gp = GpComponent.fit(r, [y], hp, mean_offset=off)
    mean, sd = gp.predict(r)
    assert mean[0] == pytest.approx(off + (y - off) * 4.0 / 4.25)
    assert sd[0] == pytest.approx(np.sqrt(4.0 - 16.0 / 4.25))


def test_prior_reversion_far_away(rng):
    X = rng.uniform(-1, 1, size=(10, 3))
    y = rng.normal(size=10) + 5.0
    hp = Hyperparameters(1.5, 0.3, 0.1)
    gp = GpComponent.fit(X, y, hp)
    mean, sd = gp.predict([[100.0, 0, 0]])
    assert mean[0] == pytest.approx(gp.mean_offset)
    assert gp.mean_offset == pytest.approx(np.mean(y))
    assert sd[0] == pytest.approx(1.5)
    _, sd_n = gp.predict([[100.0, 0, 0]], include_noise=True)
    assert sd_n[0] == pytest.approx(np.hypot(1.5, 0.1))


def test_literal_mode_prediction_matches_dense(rng):
    X = rng.uniform(-1, 1, size=(12, 3))
    y = rng.normal(size=12)
    Q = rng.uniform(-1, 1, size=(5, 3))
    hp = Hyperparameters(1.0, 0.6, 0.4)
    gp = GpComponent.fit(X, y, hp, noise_everywhere=True)
    K = kernel_matrix(hp, X, noise_everywhere=True)
    Ks = kernel_matrix(hp, Q, X, noise_everywhere=True)
    L, jitter = stable_cholesky(K, 1.16)
    Kj = K + jitter * np.eye(12)
    mean, sd = gp.predict(Q)
    np.testing.assert_allclose(mean, Ks @ np.linalg.solve(Kj, y - y.mean()) + y.mean(), rtol=1e-6, atol=1e-6)
    assert np.all(sd >= 0)


def test_optimizer_recovers_known_hyperparameters():
    rng = np.random.default_rng(262)
    truth = Hyperparameters(2.0, 0.8, 0.2)
    X = rng.uniform([-2, -1.5, -2.25], [2, 1.5, -0.5], size=(200, 3))
    K = kernel_matrix(truth, X) + 0.04 * np.eye(200)
    y = np.linalg.cholesky(K) @ rng.normal(size=200) + 10.0
    res = optimize_hyperparameters(X, y, full_output=True)
    assert np.all(np.abs(res.hyperparameters.log - truth.log) < 0.3)
    assert res.nlml <= min(res.start_nlml)
    assert res.mean_offset == pytest.approx(np.mean(y))


def test_optimizer_on_constant_targets_does_not_worsen():
    X = np.random.default_rng(0).uniform(0, 1, size=(30, 3))
    res = optimize_hyperparameters(X, np.full(30, 4.2), full_output=True)
    assert res.nlml <= min(res.start_nlml) + 1e-9
    # a zero-variance target set falls back to unit scale for the bounds
    assert res.hyperparameters.sigma_n <= 1e-4 * 1.0001 or res.hyperparameters.sigma_f <= 1e-3 * 1.0001


def test_optimizer_on_white_noise():
    rng = np.random.default_rng(264)
    X = rng.uniform(-1, 1, size=(120, 3))
    y = rng.normal(scale=0.7, size=120)
    res = optimize_hyperparameters(X, y, full_output=True)
    hp = res.hyperparameters
    assert res.nlml <= min(res.start_nlml)
    assert hp.sigma_n == pytest.approx(np.std(y), rel=0.25) or hp.length_scale > 5.0


def test_optimizer_rejects_tiny_sets():
    with pytest.raises(ValueError):
        optimize_hyperparameters([[0, 0, 0]], [1.0])


def test_optimizer_config_bounds_are_respected():
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, size=(40, 3))
    y = np.sin(3 * X[:, 0]) + 0.05 * rng.normal(size=40)
    cfg = OptimizerConfig(length_scale_bounds=(0.9, 1.1))
    hp = optimize_hyperparameters(X, y, cfg)
    assert 0.9 * (1 - 1e-9) <= hp.length_scale <= 1.1 * (1 + 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=25), st.integers(min_value=0, max_value=10_000))
def test_posterior_sd_bounded_by_prior(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 3))
    hp = Hyperparameters(*np.exp(rng.uniform([-1, -1.5, -3], [1.5, 1, 0])))
    gp = GpComponent.fit(X, rng.normal(size=n), hp)
    _, sd = predict(gp, rng.uniform(-2, 2, size=(7, 3)))
    assert np.all(sd >= 0)
    assert np.all(sd <= hp.sigma_f * (1 + 1e-9))


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=-50, max_value=50), st.integers(min_value=0, max_value=10_000))
def test_prediction_shifts_with_target_offset(shift, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(10, 3))
    y = rng.normal(size=10)
    Q = rng.uniform(-1, 1, size=(4, 3))
    hp = Hyperparameters(1.0, 0.5, 0.2)
    m0, s0 = GpComponent.fit(X, y, hp).predict(Q)
    m1, s1 = GpComponent.fit(X, y + shift, hp).predict(Q)
    np.testing.assert_allclose(m1, m0 + shift, atol=1e-9)
    np.testing.assert_allclose(s1, s0, atol=1e-12)


def test_fit_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        GpComponent.fit(np.zeros((3, 3)), [1.0, 2.0], Hyperparameters(1, 1, 1))
    with pytest.raises(ValueError):
        GpComponent.fit(np.zeros((0, 3)), [], Hyperparameters(1, 1, 1))
