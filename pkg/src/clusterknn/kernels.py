"""RBF and sum-of-atomic kernels, kernel matrices, normalization, and the
kernel-induced distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .descriptors import GlobalDescriptor, LocalDescriptor
from .errors import ConfigError, NumericalError, ShapeError

RADICAND_CLAMP = -1e-9


@dataclass(frozen=True)
class KernelParams:
    sigma: float = 1.0
    local_mode: bool = False
    normalize: bool = False

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")


def _vec(a):
    return a.vector if isinstance(a, GlobalDescriptor) else np.asarray(a, dtype=float)


def rbf_kernel(a, b, sigma):
    """exp(-||a - b||^2 / (2 sigma^2)); the Gaussian prefactor is omitted so
    that k(x, x) == 1."""
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise ShapeError(f"descriptor dims differ: {a.shape} vs {b.shape}")
    d2 = float(np.dot(a - b, a - b))
    return float(np.exp(-d2 / (2.0 * sigma**2)))


def local_sum_kernel(A: LocalDescriptor, B: LocalDescriptor, sigma):
    """Sum of atomic RBF kernels over atom pairs with matching center element."""
    if A.vectors.shape[1] != B.vectors.shape[1]:
        raise ConfigError("local descriptors come from different parameterizations")
    total = 0.0
    inv = 1.0 / (2.0 * sigma**2)
    for e in set(A.center_elements) & set(B.center_elements):
        ra = A.vectors[[i for i, ce in enumerate(A.center_elements) if ce == e]]
        rb = B.vectors[[i for i, ce in enumerate(B.center_elements) if ce == e]]
        total += float(np.exp(-(cdist(ra, rb, "sqeuclidean")) * inv).sum())
    return total


def _local_kernel_matrix(X, Y, sigma):
    """Vectorized sum-of-atomic-kernels matrix via per-element atom blocks."""
    nx, ny = len(X), len(Y)
    K = np.zeros((nx, ny))
    inv = 1.0 / (2.0 * sigma**2)
    elements = {e for d in X for e in d.center_elements}
    elements &= {e for d in Y for e in d.center_elements}
    for e in sorted(elements):
        rows_x, own_x = [], []
        for i, d in enumerate(X):
            sel = [a for a, ce in enumerate(d.center_elements) if ce == e]
            if sel:
                rows_x.append(d.vectors[sel])
                own_x.extend([i] * len(sel))
        rows_y, own_y = [], []
        for j, d in enumerate(Y):
            sel = [a for a, ce in enumerate(d.center_elements) if ce == e]
            if sel:
                rows_y.append(d.vectors[sel])
                own_y.extend([j] * len(sel))
        if not rows_x or not rows_y:
            continue
        ax, ay = np.vstack(rows_x), np.vstack(rows_y)
        k_atoms = np.exp(-cdist(ax, ay, "sqeuclidean") * inv)
        ox = sparse.csr_matrix(
            (np.ones(len(own_x)), (own_x, np.arange(len(own_x)))), shape=(nx, len(own_x))
        )
        oy = sparse.csr_matrix(
            (np.ones(len(own_y)), (np.arange(len(own_y)), own_y)), shape=(len(own_y), ny)
        )
        K += ox @ k_atoms @ oy
    return K


def kernel_matrix(X, Y=None, params: KernelParams = KernelParams()):
    """K[i, j] = k(x_i, y_j).  With Y omitted (or Y is X) the matrix is built
    from its upper triangle and mirrored, so it is symmetric to exact equality."""
    symmetric = Y is None or Y is X
    if Y is None:
        Y = X
    if len(X) == 0 or len(Y) == 0:
        raise ShapeError("empty descriptor list")
    local = isinstance(X[0], LocalDescriptor)
    if local != isinstance(Y[0], LocalDescriptor):
        raise ShapeError("mixed local/global descriptor lists")
    if local:
        K = _local_kernel_matrix(X, Y, params.sigma)
        if symmetric:
            iu = np.triu_indices(len(X), k=1)
            K[(iu[1], iu[0])] = K[iu]
    else:
        gx = np.vstack([_vec(d) for d in X])
        gy = np.vstack([_vec(d) for d in Y])
        if gx.shape[1] != gy.shape[1]:
            raise ShapeError(f"descriptor dims differ: {gx.shape[1]} vs {gy.shape[1]}")
        K = np.exp(-cdist(gx, gy, "sqeuclidean") / (2.0 * params.sigma**2))
        if symmetric:
            iu = np.triu_indices(len(X), k=1)
            K[(iu[1], iu[0])] = K[iu]
            np.fill_diagonal(K, 1.0)
    if params.normalize:
        K = _normalize_cross(K, X, Y, params) if not symmetric else normalize_kernel(K)
    return K


def _normalize_cross(K, X, Y, params):
    kx = np.array([_self_similarity(x, params) for x in X])
    ky = np.array([_self_similarity(y, params) for y in Y])
    if np.any(kx <= 0) or np.any(ky <= 0):
        raise NumericalError("nonpositive self-similarity; cannot normalize")
    return K / np.sqrt(np.outer(kx, ky))


def normalize_kernel(K):
    """Scale K so the diagonal is exactly 1: K[i,j] / sqrt(K[i,i] K[j,j])."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError("normalize_kernel needs a square matrix")
    d = np.diag(K)
    if np.any(d <= 0):
        raise NumericalError("kernel diagonal must be strictly positive")
    s = 1.0 / np.sqrt(d)
    return K * np.outer(s, s)


def _self_similarity(a, params: KernelParams):
    if isinstance(a, LocalDescriptor):
        return local_sum_kernel(a, a, params.sigma)
    return 1.0  # global RBF: k(x, x) == 1

def evaluate_kernel(a, b, params: KernelParams):
    if isinstance(a, LocalDescriptor):
        k = local_sum_kernel(a, b, params.sigma)
        if params.normalize:
            k /= np.sqrt(_self_similarity(a, params) * _self_similarity(b, params))
        return k
    return rbf_kernel(a, b, params.sigma)


def kernel_induced_distance(a, b, params: KernelParams):
    """sqrt(k(a,a) + k(b,b) - 2 k(a,b)): Euclidean distance in the kernel's
    feature space; a pseudometric for positive definite kernels."""
    kaa = _self_similarity(a, params)
    kbb = _self_similarity(b, params)
    if params.normalize:
        kaa = kbb = 1.0
    kab = evaluate_kernel(a, b, params)
    rad = kaa + kbb - 2.0 * kab
    if rad < RADICAND_CLAMP:
        raise NumericalError(f"kernel-induced radicand {rad} below clamp tolerance")
    return float(np.sqrt(max(rad, 0.0)))


class KernelDistance:
    """Kernel-induced distance with cached self-similarities, for repeated
    pairwise evaluation (tree search, distance matrices)."""

    def __init__(self, params: KernelParams):
        self.params = params
        self._self_cache: dict[int, float] = {}

    def self_similarity(self, a):
        key = id(a)
        if key not in self._self_cache:
            self._self_cache[key] = (
                1.0 if self.params.normalize else _self_similarity(a, self.params)
            )
        return self._self_cache[key]

    def __call__(self, a, b):
        kab = evaluate_kernel(a, b, self.params)
        rad = self.self_similarity(a) + self.self_similarity(b) - 2.0 * kab
        if rad < RADICAND_CLAMP:
            raise NumericalError(f"kernel-induced radicand {rad} below clamp tolerance")
        return float(np.sqrt(max(rad, 0.0)))

    def matrix(self, X, Y=None):
        """Pairwise kernel-induced distance matrix."""
        symmetric = Y is None
        K = kernel_matrix(X, Y, self.params)
        kx = np.array([self.self_similarity(x) for x in X])
        ky = kx if symmetric else np.array([self.self_similarity(y) for y in Y])
        rad = kx[:, None] + ky[None, :] - 2.0 * K
        if rad.min() < RADICAND_CLAMP:
            raise NumericalError(f"kernel-induced radicand {rad.min()} below clamp tolerance")
        D = np.sqrt(np.maximum(rad, 0.0))
        if symmetric:
            np.fill_diagonal(D, 0.0)
        return D
