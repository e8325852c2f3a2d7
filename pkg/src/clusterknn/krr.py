"""Kernel ridge regression: closed-form training, prediction and grid search."""
from __future__ import annotations

import pickle
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, NumericalError, ShapeError
from .kernels import KernelParams, kernel_matrix

DEFAULT_SIGMA_GRID_GLOBAL = tuple(float(2**i) for i in range(0, 11))  # 1 .. 1024
DEFAULT_SIGMA_GRID_LOCAL = tuple(float(2**i) for i in range(-1, 7))  # 0.5 .. 64
DEFAULT_LAMBDA_GRID = tuple(10.0**e for e in range(-10, -3))  # 1e-10 .. 1e-4


@dataclass
class KrrModel:
    alpha: np.ndarray
    kernel_params: KernelParams
    lam: float
    train_descriptors: list = field(repr=False, default=None)
    train_time_cpu_s: float = 0.0

    def save(self, path):
        with open(path, "wb") as fh:
            pickle.dump(self, fh)

    @staticmethod
    def load(path):
        with open(path, "rb") as fh:
            model = pickle.load(fh)
        if not isinstance(model, KrrModel):
            raise ConfigError(f"{path} does not contain a KrrModel")
        return model


def krr_train(K, y, lam, max_jitter_retries=3):
    """Solve (K + lam*I) alpha = y with a Cholesky factorization.

    Retries with lam * 10 (up to max_jitter_retries, with a warning) when the
    factorization fails on a rank-deficient kernel matrix.
    """
    K = np.asarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError("kernel matrix must be square")
    if K.shape[0] != len(y):
        raise ShapeError("label length does not match kernel matrix")
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    current = lam
    scale = max(np.max(np.abs(y)), 1e-300)
    for attempt in range(max_jitter_retries + 1):
        try:
            c = cho_factor(K + current * np.eye(len(y)), lower=True)
            alpha = cho_solve(c, y)
            resid = np.max(np.abs((K + current * np.eye(len(y))) @ alpha - y))
            if resid <= 1e-8 * scale:
                return alpha
            problem = f"solver residual {resid:g} exceeds 1e-8 * ||y||_inf"
        except np.linalg.LinAlgError:
            problem = f"Cholesky failed at lambda={current:g}"
        if attempt == max_jitter_retries:
            raise NumericalError(f"{problem}; increase the ridge penalty")
        current = max(current, 1e-14) * 10.0
        warnings.warn(f"ill-conditioned kernel matrix ({problem}); retrying with lambda={current:g}")


def fit_krr(descriptors, y, kernel_params: KernelParams, lam) -> KrrModel:
    """Assemble the training kernel matrix and solve for the weights."""
    t0 = time.process_time()
    K = kernel_matrix(descriptors, None, kernel_params)
    alpha = krr_train(K, y, lam)
    return KrrModel(
        alpha=alpha,
        kernel_params=kernel_params,
        lam=lam,
        train_descriptors=list(descriptors),
        train_time_cpu_s=time.process_time() - t0,
    )


def krr_predict(model: KrrModel, X_new):
    """Predictions K_cross @ alpha for a list of query descriptors."""
    K_cross = kernel_matrix(X_new, model.train_descriptors, model.kernel_params)
    return K_cross @ model.alpha


def krr_grid_search(train_descs, train_y, val_descs, val_y,
                    sigma_grid=DEFAULT_SIGMA_GRID_GLOBAL,
                    lambda_grid=DEFAULT_LAMBDA_GRID,
                    local_mode=False, normalize=False):
    """Pick (sigma, lambda) minimizing validation MAE.

    Ties are broken toward larger lambda, then larger sigma (prefer the
    smoother model).
    """
    if not sigma_grid or not lambda_grid:
        raise ConfigError("grids must be nonempty")
    best = None
    for sigma in sorted(sigma_grid):
        params = KernelParams(sigma=sigma, local_mode=local_mode, normalize=normalize)
        K_train = kernel_matrix(train_descs, None, params)
        K_val = kernel_matrix(val_descs, train_descs, params)
        for lam in sorted(lambda_grid):
            try:
                alpha = krr_train(K_train, train_y, lam, max_jitter_retries=0)
            except NumericalError:
                continue
            mae = float(np.mean(np.abs(K_val @ alpha - np.asarray(val_y))))
            if best is None or mae < best[0] or (
                mae == best[0] and (lam, sigma) > (best[2], best[1])
            ):
                best = (mae, sigma, lam)
    if best is None:
        raise NumericalError("no grid point produced a solvable system")
    return best[1], best[2]
