import numpy as np
import pytest

from clusterknn.descriptors import GlobalDescriptor
from clusterknn.errors import ConfigError, NumericalError, ShapeError
from clusterknn.kernels import KernelParams, kernel_matrix
from clusterknn.krr import KrrModel, fit_krr, krr_grid_search, krr_predict, krr_train


def _g(v):
    return GlobalDescriptor(np.asarray(v, dtype=float))


def _random_problem(rng, n=30, p=4):
    X = [_g(rng.standard_normal(p)) for _ in range(n)]
    y = rng.standard_normal(n)
    return X, y


def test_krr_train_scalar():
    # (K + lam) alpha = y in one dimension: alpha = y / (K + lam)
    alpha = krr_train(np.array([[2.0]]), np.array([3.0]), lam=1.0)
    assert alpha[0] == pytest.approx(1.0, rel=1e-14)


def test_krr_train_2x2_oracle():
    K = np.array([[1.0, 0.5], [0.5, 1.0]])
    y = np.array([1.0, -1.0])
    lam = 0.1
    alpha = krr_train(K, y, lam)
    expected = np.linalg.solve(K + lam * np.eye(2), y)
    np.testing.assert_allclose(alpha, expected, rtol=1e-13)


def test_krr_train_matches_numpy_solve():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((25, 25))
    K = B @ B.T / 25 + np.eye(25)
    y = rng.standard_normal(25)
    np.testing.assert_allclose(
        krr_train(K, y, 1e-6), np.linalg.solve(K + 1e-6 * np.eye(25), y), rtol=1e-9
    )


def test_krr_train_linear_in_y():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((10, 10))
    K = B @ B.T + np.eye(10)
    y1, y2 = rng.standard_normal(10), rng.standard_normal(10)
    a = krr_train(K, 2 * y1 + 3 * y2, 0.01)
    b = 2 * krr_train(K, y1, 0.01) + 3 * krr_train(K, y2, 0.01)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_krr_train_validation():
    with pytest.raises(ShapeError):
        krr_train(np.zeros((2, 3)), np.zeros(2), 0.1)
    with pytest.raises(ShapeError):
        krr_train(np.eye(2), np.zeros(3), 0.1)
    with pytest.raises(ConfigError):
        krr_train(np.eye(2), np.zeros(2), -0.1)


def test_krr_train_jitter_retry_warns():
    # Rank-deficient K with lam = 0 cannot factor; jitter retries must recover.
    K = np.ones((4, 4))
    y = np.ones(4)
    with pytest.warns(UserWarning, match="retrying"):
        alpha = krr_train(K, y, lam=0.0)
    assert np.all(np.isfinite(alpha))


def test_krr_train_jitter_exhausted():
    K = -np.eye(3)  # negative definite: no jitter within 3 retries fixes it
    with pytest.raises(NumericalError):
        with pytest.warns(UserWarning):
            krr_train(K, np.ones(3), lam=1e-14)


def test_krr_interpolates_at_tiny_lambda():
    rng = np.random.default_rng(2)
    X, y = _random_problem(rng, n=20)
    model = fit_krr(X, y, KernelParams(sigma=2.0), lam=1e-12)
    np.testing.assert_allclose(krr_predict(model, X), y, atol=1e-6)


def test_krr_ridge_limit_shrinks_to_zero():
    # As lam -> inf, alpha -> y / lam -> 0 and predictions collapse toward 0
    rng = np.random.default_rng(3)
    X, y = _random_problem(rng, n=15)
    model = fit_krr(X, y, KernelParams(sigma=2.0), lam=1e8)
    assert np.max(np.abs(krr_predict(model, X))) < 1e-6


def test_krr_predict_matches_manual():
    rng = np.random.default_rng(4)
    X, y = _random_problem(rng, n=12)
    Q, _ = _random_problem(rng, n=5)
    params = KernelParams(sigma=1.5)
    model = fit_krr(X, y, params, lam=1e-6)
    expected = kernel_matrix(Q, X, params) @ model.alpha
    np.testing.assert_allclose(krr_predict(model, Q), expected, rtol=1e-14)


def test_krr_residual_contract_on_ill_conditioned_system():
    # Even near the edge of factorability the returned weights must satisfy
    # the documented residual bound.
    from scipy.linalg import hilbert

    K = hilbert(12)
    y = np.ones(12)
    alpha = krr_train(K, y, lam=0.0)
    assert np.max(np.abs(K @ alpha - y)) <= 1e-8 * np.max(np.abs(y))


def test_krr_model_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    X, y = _random_problem(rng, n=10)
    model = fit_krr(X, y, KernelParams(sigma=1.0), lam=1e-8)
    p = tmp_path / "model.pkl"
    model.save(p)
    loaded = KrrModel.load(p)
    np.testing.assert_array_equal(loaded.alpha, model.alpha)
    np.testing.assert_allclose(krr_predict(loaded, X), krr_predict(model, X), rtol=1e-15)


def test_krr_model_load_rejects_wrong_type(tmp_path):
    import pickle

    p = tmp_path / "junk.pkl"
    with open(p, "wb") as fh:
        pickle.dump({"not": "a model"}, fh)
    with pytest.raises(ConfigError):
        KrrModel.load(p)


def test_grid_search_recovers_generating_kernel():
    # Data generated from a sigma=4 kernel expansion; the search should not
    # pick a wildly different bandwidth and must beat the worst grid point.
    rng = np.random.default_rng(6)
    X = [_g(rng.standard_normal(3)) for _ in range(60)]
    true = KernelParams(sigma=4.0)
    w = rng.standard_normal(60)
    y = kernel_matrix(X, None, true) @ w
    sigma, lam = krr_grid_search(
        X[:40], y[:40], X[40:], y[40:], sigma_grid=(0.25, 4.0, 64.0), lambda_grid=(1e-8,)
    )
    assert sigma == 4.0
    assert lam == 1e-8


def test_grid_search_tie_prefers_smoother():
    # With constant labels every grid point achieves identical validation MAE;
    # ties resolve to the largest lambda, then the largest sigma.
    rng = np.random.default_rng(7)
    X = [_g(rng.standard_normal(2)) for _ in range(20)]
    y = np.zeros(20)
    sigma, lam = krr_grid_search(
        X[:15], y[:15], X[15:], y[15:], sigma_grid=(1.0, 2.0), lambda_grid=(1e-8, 1e-6)
    )
    assert (sigma, lam) == (2.0, 1e-6)


def test_grid_search_empty_grid():
    with pytest.raises(ConfigError):
        krr_grid_search([_g([1.0])], [1.0], [_g([2.0])], [2.0], sigma_grid=())


def test_krr_training_cost_scales_cubically():
    # Doubling n should cost roughly 8x once the solve dominates; allow a very
    # loose band because constants and BLAS threading vary.
    import time

    rng = np.random.default_rng(8)
    times = []
    for n in (400, 800):
        B = rng.standard_normal((n, n))
        K = B @ B.T / n + np.eye(n)
        y = rng.standard_normal(n)
        t0 = time.process_time()
        for _ in range(3):
            krr_train(K, y, 1e-6)
        times.append(time.process_time() - t0)
    ratio = times[1] / times[0]
    assert 2.0 < ratio < 32.0
