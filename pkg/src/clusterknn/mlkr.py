"""Metric learning for kernel regression: learns a linear transform A whose
Mahalanobis metric M = A^T A minimizes the leave-one-out kernel-regression
squared error."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, NumericalError, ShapeError

STD_CLAMP = 1e-12
FULL_BATCH_LIMIT = 5000
MINIBATCH_ANCHORS = 2048


@dataclass(frozen=True)
class MlkrConfig:
    p_out: int = 50
    max_train_points: int = 25_000
    max_iter: int = 200
    grad_tol: float = 1e-6
    seed: int = 0
    optimizer: str = "gradient_descent_backtracking"  # or "adaptive_moment"

    def __post_init__(self):
        if self.p_out < 1 or self.max_iter < 1:
            raise ConfigError("p_out and max_iter must be at least 1")
        if self.optimizer not in ("gradient_descent_backtracking", "adaptive_moment"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class MlkrTransform:
    """Learned linear map; apply with transform().  Input standardization from
    fitting is already folded into A, so distances need only the linear part."""

    A: np.ndarray  # (p_out, p_in)
    p_out: int
    training_fingerprint: str = ""
    objective_trace: list = field(default_factory=list)

    def save(self, path):
        base = str(path).removesuffix(".npz")
        np.savez(base + ".npz", A=self.A,
                 trace=np.array(self.objective_trace, dtype=float).reshape(-1, 2))
        meta = {
            "p_in": int(self.A.shape[1]),
            "p_out": int(self.p_out),
            "training_fingerprint": self.training_fingerprint,
        }
        with open(base + ".json", "w") as fh:
            json.dump(meta, fh, indent=2)

    @staticmethod
    def load(path):
        base = str(path).removesuffix(".npz")
        data = np.load(base + ".npz")
        with open(base + ".json") as fh:
            meta = json.load(fh)
        return MlkrTransform(
            A=data["A"],
            p_out=meta["p_out"],
            training_fingerprint=meta["training_fingerprint"],
            objective_trace=[(int(i), float(l)) for i, l in data["trace"]],
        )

    def trace_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,loss\n")
            for it, loss in self.objective_trace:
                fh.write(f"{it},{loss:.17g}\n")


def transform(t: MlkrTransform, X):
    """Map points through A; Euclidean distances of the images equal the
    Mahalanobis distances under M = A^T A."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != t.A.shape[1]:
        raise ShapeError(f"expected {t.A.shape[1]} features, got {X.shape[1]}")
    out = X @ t.A.T
    return out[0] if single else out


def _loo_weights(XA, anchors=None):
    """Leave-one-out softmax weights exp(-d^2), row-shifted by the per-row
    minimum so at least the nearest point never underflows."""
    if anchors is None:
        D = cdist(XA, XA, "sqeuclidean")
        np.fill_diagonal(D, np.inf)
    else:
        D = cdist(XA[anchors], XA, "sqeuclidean")
        D[np.arange(len(anchors)), anchors] = np.inf
    shift = D.min(axis=1, keepdims=True)
    K = np.exp(shift - D)  # diagonal exp(-inf) == 0
    S = K.sum(axis=1, keepdims=True)
    return K / S


def _check_inputs(A, X, y):
    A = np.asarray(A, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ShapeError("X must be 2-D")
    if len(y) != X.shape[0]:
        raise ShapeError("label length does not match X")
    if A.ndim != 2 or A.shape[1] != X.shape[1]:
        raise ShapeError(f"A must be (p_out, {X.shape[1]})")
    if X.shape[0] < 2:
        raise ConfigError("MLKR needs at least 2 points")
    return A, X, y


def mlkr_loss(A, X, y):
    """Sum of squared leave-one-out kernel-regression residuals under the
    metric induced by A."""
    A, X, y = _check_inputs(A, X, y)
    W = _loo_weights(X @ A.T)
    y_hat = W @ y
    return float(np.sum((y - y_hat) ** 2))


def _loss_and_gradient(A, X, y, anchors=None):
    XA = X @ A.T
    W = _loo_weights(XA, anchors=anchors)
    ya = y if anchors is None else y[anchors]
    y_hat = W @ y
    r = y_hat - ya
    loss = float(np.sum(r**2))
    # dL/dA = 4 A sum_ij r_i w_ij (yhat_i - y_j) (x_i - x_j)(x_i - x_j)^T,
    # assembled via the graph-Laplacian identity on the weight matrix.
    P = W * (r[:, None] * (y_hat[:, None] - y[None, :]))
    Xa = X if anchors is None else X[anchors]
    if anchors is None:
        M = P + P.T
        s = M.sum(axis=1)
        XtLX = X.T @ (X * s[:, None]) - X.T @ (M @ X)
    else:
        row = P.sum(axis=1)
        col = P.sum(axis=0)
        XtLX = (
            Xa.T @ (Xa * row[:, None])
            + X.T @ (X * col[:, None])
            - Xa.T @ (P @ X)
            - (Xa.T @ (P @ X)).T
        )
    grad = 4.0 * (A @ XtLX)
    return loss, grad


def mlkr_gradient(A, X, y):
    """Analytic gradient of mlkr_loss with respect to A."""
    A, X, y = _check_inputs(A, X, y)
    return _loss_and_gradient(A, X, y)[1]


def _pca_init(X, p_out, rng):
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    A = np.zeros((p_out, X.shape[1]))
    A[: min(p_out, vt.shape[0])] = vt[:p_out]
    # Scale so typical projected pairwise squared distances are O(1); keeps
    # the exp(-d^2) weights away from immediate underflow.
    sample = X[rng.choice(len(X), size=min(len(X), 500), replace=False)]
    d2 = cdist(sample @ A.T, sample @ A.T, "sqeuclidean")
    mean_d2 = d2[np.triu_indices(len(sample), k=1)].mean()
    if mean_d2 > 0:
        A = A / np.sqrt(mean_d2)
    return A


def _fingerprint(X, y, config):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    h.update(repr(config).encode())
    return h.hexdigest()[:16]


def mlkr_fit(X, y, config: MlkrConfig = MlkrConfig()) -> MlkrTransform:
    """Standardize, initialize A from PCA, and minimize the LOO loss.

    Datasets beyond config.max_train_points are fitted on a seeded uniform
    subsample.  Full-batch gradient descent with backtracking keeps the
    accepted-step loss trace monotone for n <= 5000; larger sets switch to
    mini-batched anchor rows with an adaptive-moment update.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise ShapeError("X must be (n, p) with matching labels")
    if X.shape[0] < 2:
        raise ConfigError("MLKR needs at least 2 points")
    rng = np.random.default_rng(config.seed)
    fingerprint = _fingerprint(X, y, config)

    if X.shape[0] > config.max_train_points:
        sel = rng.permutation(X.shape[0])[: config.max_train_points]
        X, y = X[sel], y[sel]

    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_CLAMP)
    Xs = (X - mean) / std

    p_out = min(config.p_out, X.shape[1])
    A = _pca_init(Xs, p_out, rng)
    if not np.all(np.isfinite(A)) or not np.isfinite(mlkr_loss(A, Xs, y)):
        raise NumericalError("non-finite loss at initialization")

    minibatch = X.shape[0] > FULL_BATCH_LIMIT
    if config.optimizer == "adaptive_moment" or minibatch:
        A, trace = _fit_adam(A, Xs, y, config, rng, minibatch)
    else:
        A, trace = _fit_backtracking(A, Xs, y, config)

    return MlkrTransform(
        A=A / std[None, :],
        p_out=p_out,
        training_fingerprint=fingerprint,
        objective_trace=trace,
    )


def _fit_backtracking(A, X, y, config, c_armijo=1e-4, shrink=0.5):
    loss, grad = _loss_and_gradient(A, X, y)
    trace = [(0, loss)]
    step = 1.0
    for it in range(1, config.max_iter + 1):
        gnorm = np.max(np.abs(grad))
        if gnorm <= config.grad_tol:
            break
        g2 = float(np.sum(grad**2))
        t = step
        accepted = False
        while t > 1e-14:
            cand = A - t * grad
            cand_loss = mlkr_loss(cand, X, y)
            if cand_loss <= loss - c_armijo * t * g2:
                accepted = True
                break
            t *= shrink
        if not accepted:
            break
        A = A - t * grad
        step = min(t / shrink, 1e6)  # allow the step to grow back
        loss, grad = _loss_and_gradient(A, X, y)
        trace.append((it, loss))
    return A, trace


def _fit_adam(A, X, y, config, rng, minibatch, lr=0.05, b1=0.9, b2=0.999, eps=1e-8):
    n = X.shape[0]
    m = np.zeros_like(A)
    v = np.zeros_like(A)
    best_A, best_loss = A.copy(), np.inf
    trace = []
    for it in range(1, config.max_iter + 1):
        anchors = (
            np.sort(rng.choice(n, size=min(MINIBATCH_ANCHORS, n), replace=False))
            if minibatch
            else None
        )
        loss, grad = _loss_and_gradient(A, X, y, anchors=anchors)
        trace.append((it - 1, loss))
        if loss < best_loss:
            best_loss, best_A = loss, A.copy()
        if np.max(np.abs(grad)) <= config.grad_tol:
            break
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        mh = m / (1 - b1**it)
        vh = v / (1 - b2**it)
        A = A - lr * mh / (np.sqrt(vh) + eps)
    if not minibatch:
        final = mlkr_loss(A, X, y)
        if final < best_loss:
            best_loss, best_A = final, A
        trace.append((config.max_iter, best_loss))
        return best_A, trace
    return A, trace


def kernel_regression_predict(t: MlkrTransform, X_train, y_train, X_query):
    """Nadaraya-Watson regression with weights exp(-d^2) in the learned metric
    (softmax over negative squared distances, max-shifted per query)."""
    y_train = np.asarray(y_train, dtype=float)
    train = transform(t, X_train)
    query = transform(t, np.atleast_2d(np.asarray(X_query, dtype=float)))
    D = cdist(query, train, "sqeuclidean")
    shift = D.min(axis=1, keepdims=True)
    K = np.exp(shift - D)
    return (K @ y_train) / K.sum(axis=1)
