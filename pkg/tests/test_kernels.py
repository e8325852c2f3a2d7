import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterknn.dataset import Structure
from clusterknn.descriptors import (
    DescriptorParams,
    GlobalDescriptor,
    LmbParams,
    LocalDescriptor,
    local_many_body,
)
from clusterknn.errors import ConfigError, NumericalError, ShapeError
from clusterknn.kernels import (
    KernelDistance,
    KernelParams,
    kernel_induced_distance,
    kernel_matrix,
    local_sum_kernel,
    normalize_kernel,
    rbf_kernel,
)

LMB = DescriptorParams(kind="LMB", lmb=LmbParams(r_cut=6.0, n_radial=6, n_angular=4))


def _g(v):
    return GlobalDescriptor(np.asarray(v, dtype=float))


def _random_local(rng, n_atoms=4):
    elems = [("H", "O", "C")[i] for i in rng.integers(0, 3, n_atoms)]
    s = Structure(id="t", elements=tuple(elems), coords=rng.uniform(0, 4, (n_atoms, 3)))
    return local_many_body(s, LMB)


def test_rbf_hand_value():
    # ||a-b||^2 = 2, sigma = 1 -> exp(-1)
    assert rbf_kernel(_g([1.0, 0.0]), _g([0.0, 1.0]), sigma=1.0) == pytest.approx(
        np.exp(-1.0), rel=1e-14
    )
    assert np.exp(-1.0) == pytest.approx(0.367879, abs=1e-6)


def test_rbf_self_is_one():
    rng = np.random.default_rng(0)
    x = _g(rng.standard_normal(7))
    assert rbf_kernel(x, x, sigma=3.0) == 1.0


def test_rbf_shape_mismatch():
    with pytest.raises(ShapeError):
        rbf_kernel(_g([1.0]), _g([1.0, 2.0]), sigma=1.0)


def test_kernel_params_validation():
    with pytest.raises(ConfigError):
        KernelParams(sigma=0.0)
    with pytest.raises(ConfigError):
        KernelParams(sigma=-1.0)


def test_kernel_matrix_symmetry_exact():
    rng = np.random.default_rng(1)
    X = [_g(rng.standard_normal(5)) for _ in range(20)]
    K = kernel_matrix(X, params=KernelParams(sigma=2.0))
    assert np.array_equal(K, K.T)
    np.testing.assert_array_equal(np.diag(K), 1.0)


def test_kernel_matrix_matches_pairwise():
    rng = np.random.default_rng(2)
    X = [_g(rng.standard_normal(4)) for _ in range(6)]
    Y = [_g(rng.standard_normal(4)) for _ in range(5)]
    params = KernelParams(sigma=1.5)
    K = kernel_matrix(X, Y, params)
    for i, a in enumerate(X):
        for j, b in enumerate(Y):
            assert K[i, j] == pytest.approx(rbf_kernel(a, b, 1.5), rel=1e-14)


def test_kernel_matrix_psd():
    # Gram matrices of the RBF kernel are positive semidefinite
    rng = np.random.default_rng(3)
    X = [_g(rng.standard_normal(6)) for _ in range(30)]
    K = kernel_matrix(X, params=KernelParams(sigma=1.0))
    w = np.linalg.eigvalsh(K)
    assert w.min() > -1e-10


def test_normalize_kernel_hand_case():
    K = np.array([[4.0, 2.0], [2.0, 1.0]])
    np.testing.assert_allclose(normalize_kernel(K), np.ones((2, 2)), rtol=1e-15)


def test_normalize_kernel_unit_diagonal():
    rng = np.random.default_rng(4)
    B = rng.standard_normal((8, 8))
    K = B @ B.T + 8 * np.eye(8)
    Kn = normalize_kernel(K)
    np.testing.assert_allclose(np.diag(Kn), 1.0, rtol=1e-15)


def test_normalize_kernel_rejects_bad_input():
    with pytest.raises(ShapeError):
        normalize_kernel(np.zeros((2, 3)))
    with pytest.raises(NumericalError):
        normalize_kernel(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_local_sum_kernel_matching_elements_only():
    # H-center rows never pair with O-center rows
    a = LocalDescriptor(np.zeros((1, 3)), ("H",))
    b = LocalDescriptor(np.zeros((1, 3)), ("O",))
    assert local_sum_kernel(a, b, sigma=1.0) == 0.0
    c = LocalDescriptor(np.zeros((1, 3)), ("H",))
    assert local_sum_kernel(a, c, sigma=1.0) == pytest.approx(1.0)


def test_local_sum_kernel_brute_oracle():
    rng = np.random.default_rng(5)
    A = _random_local(rng)
    B = _random_local(rng, n_atoms=3)
    sigma = 1.3
    expected = 0.0
    for i, ea in enumerate(A.center_elements):
        for j, eb in enumerate(B.center_elements):
            if ea == eb:
                d2 = np.sum((A.vectors[i] - B.vectors[j]) ** 2)
                expected += np.exp(-d2 / (2 * sigma**2))
    assert local_sum_kernel(A, B, sigma) == pytest.approx(expected, rel=1e-12)


def test_local_kernel_matrix_matches_pairwise():
    rng = np.random.default_rng(6)
    X = [_random_local(rng) for _ in range(5)]
    Y = [_random_local(rng, n_atoms=3) for _ in range(4)]
    params = KernelParams(sigma=0.8, local_mode=True)
    K = kernel_matrix(X, Y, params)
    for i, a in enumerate(X):
        for j, b in enumerate(Y):
            assert K[i, j] == pytest.approx(local_sum_kernel(a, b, 0.8), rel=1e-12)


def test_local_kernel_matrix_symmetric():
    rng = np.random.default_rng(7)
    X = [_random_local(rng) for _ in range(8)]
    K = kernel_matrix(X, params=KernelParams(sigma=1.0, local_mode=True))
    assert np.array_equal(K, K.T)


def test_kernel_induced_distance_hand_value():
    # global RBF: d = sqrt(2 - 2 k(a,b)); with k = exp(-1): 1.1242923
    a, b = _g([1.0, 0.0]), _g([0.0, 1.0])
    d = kernel_induced_distance(a, b, KernelParams(sigma=1.0))
    assert d == pytest.approx(np.sqrt(2 - 2 * np.exp(-1.0)), rel=1e-14)
    assert d == pytest.approx(1.12438, abs=1e-5)


def test_kernel_induced_distance_identity():
    x = _g([3.0, -2.0, 0.5])
    assert kernel_induced_distance(x, x, KernelParams(sigma=2.0)) == 0.0


def test_kernel_induced_distance_symmetry():
    rng = np.random.default_rng(8)
    params = KernelParams(sigma=1.2)
    for _ in range(10):
        a, b = _g(rng.standard_normal(5)), _g(rng.standard_normal(5))
        assert kernel_induced_distance(a, b, params) == kernel_induced_distance(b, a, params)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_kernel_induced_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    params = KernelParams(sigma=1.0)
    a, b, c = (_g(rng.standard_normal(4)) for _ in range(3))
    dab = kernel_induced_distance(a, b, params)
    dbc = kernel_induced_distance(b, c, params)
    dac = kernel_induced_distance(a, c, params)
    assert dac <= dab + dbc + 1e-12


def test_unnormalized_local_distance_not_monotone_in_geometry():
    # Two identical far-apart atoms vs one atom: the sum kernel rewards size,
    # so the unnormalized induced distance need not track geometric similarity.
    single = LocalDescriptor(np.zeros((1, 2)), ("H",))
    double = LocalDescriptor(np.zeros((2, 2)), ("H", "H"))
    params = KernelParams(sigma=1.0, local_mode=True)
    d_self = kernel_induced_distance(double, single, params)
    # k(double,double)=4, k(single,single)=1, k(double,single)=2 -> d=1
    assert d_self == pytest.approx(1.0, rel=1e-12)
    # normalization removes the size effect: identical environments -> d = 0
    params_n = KernelParams(sigma=1.0, local_mode=True, normalize=True)
    assert kernel_induced_distance(double, single, params_n) == pytest.approx(0.0, abs=1e-7)


def test_kernel_distance_matrix_matches_scalar():
    rng = np.random.default_rng(9)
    X = [_random_local(rng) for _ in range(6)]
    Y = [_random_local(rng, n_atoms=3) for _ in range(4)]
    params = KernelParams(sigma=1.0, local_mode=True, normalize=True)
    dist = KernelDistance(params)
    D = dist.matrix(X, Y)
    for i, a in enumerate(X):
        for j, b in enumerate(Y):
            assert D[i, j] == pytest.approx(kernel_induced_distance(a, b, params), abs=1e-10)
    Dsym = dist.matrix(X)
    np.testing.assert_array_equal(np.diag(Dsym), 0.0)
    np.testing.assert_allclose(Dsym, Dsym.T, atol=1e-12)


def test_kernel_matrix_rejects_empty_and_mixed():
    with pytest.raises(ShapeError):
        kernel_matrix([], params=KernelParams())
    rng = np.random.default_rng(10)
    with pytest.raises(ShapeError):
        kernel_matrix([_g([1.0])], [_random_local(rng)], KernelParams())
