"""Exact k-nearest-neighbour search (kd/ball/vp/brute backends), weighted
regression, single-pass leave-one-out k tuning, and neighbour-set uncertainty."""
from __future__ import annotations

import heapq
import pickle
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.neighbors import BallTree, KDTree

from .errors import ConfigError, ShapeError
from .kernels import KernelDistance, KernelParams
from .mlkr import MlkrTransform, transform

ZERO_DISTANCE_EPS = 1e-12
BRUTE_THRESHOLD = 500
KD_MAX_DIM = 30


@dataclass(frozen=True)
class MetricSpec:
    """One of: plain Euclidean, Mahalanobis via a linear transform, or the
    kernel-induced feature-space distance."""

    kind: str = "euclidean"  # "euclidean" | "mahalanobis" | "kernel_induced"
    mlkr_transform: MlkrTransform | None = None
    kernel_params: KernelParams | None = None

    def __post_init__(self):
        if self.kind not in ("euclidean", "mahalanobis", "kernel_induced"):
            raise ConfigError(f"unknown metric kind {self.kind!r}")
        if self.kind == "mahalanobis" and self.mlkr_transform is None:
            raise ConfigError("mahalanobis metric requires a transform")
        if self.kind == "kernel_induced" and self.kernel_params is None:
            raise ConfigError("kernel-induced metric requires kernel params")


@dataclass(frozen=True)
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)


class _VpNode:
    __slots__ = ("vantage", "mu", "inside", "outside")

    def __init__(self, vantage, mu, inside, outside):
        self.vantage = vantage
        self.mu = mu
        self.inside = inside
        self.outside = outside


class VpTree:
    """Vantage-point tree for exact k-NN under any metric satisfying the
    triangle inequality.  Items are referenced by index into `items`; leaves
    (small or metrically degenerate groups) hold plain index lists."""

    LEAF_SIZE = 16

    def __init__(self, items, distance, seed=0):
        if len(items) == 0:
            raise ConfigError("cannot build a tree on zero points")
        self.items = items
        self.distance = distance
        rng = np.random.default_rng(seed)
        self.root = self._build(list(range(len(items))), rng)

    def _build(self, idxs, rng):
        if not idxs:
            return None
        if len(idxs) <= self.LEAF_SIZE:
            return idxs
        v = idxs[rng.integers(len(idxs))]
        rest = [i for i in idxs if i != v]
        dists = np.array([self.distance(self.items[v], self.items[i]) for i in rest])
        mu = float(np.median(dists))
        inside = [i for i, d in zip(rest, dists) if d <= mu]
        outside = [i for i, d in zip(rest, dists) if d > mu]
        if not outside:  # all points within mu of the vantage; avoid a chain
            return idxs
        return _VpNode(v, mu, self._build(inside, rng), self._build(outside, rng))

    def query(self, item, k):
        """k nearest item indices; ties resolved toward the smaller index."""
        # Max-heap keyed on (-distance, -index): the root is the current worst
        # candidate under the (distance, index) ordering.
        heap: list[tuple[float, int]] = []

        def worst():
            return (-heap[0][0], -heap[0][1]) if len(heap) == k else (np.inf, -1)

        def offer(d, i):
            if (d, i) < worst():
                if len(heap) == k:
                    heapq.heapreplace(heap, (-d, -i))
                else:
                    heapq.heappush(heap, (-d, -i))

        def visit(node):
            if node is None:
                return
            if isinstance(node, list):
                for i in node:
                    offer(self.distance(item, self.items[i]), i)
                return
            d = self.distance(item, self.items[node.vantage])
            offer(d, node.vantage)
            if d < node.mu:
                visit(node.inside)
                if d + worst()[0] >= node.mu:
                    visit(node.outside)
            else:
                visit(node.outside)
                if d - worst()[0] <= node.mu:
                    visit(node.inside)

        visit(self.root)
        out = sorted(((-d, -i) for d, i in heap))
        return (
            np.array([d for d, _ in out]),
            np.array([i for _, i in out], dtype=int),
        )


@dataclass
class NeighborIndex:
    backend: str
    metric: MetricSpec
    points: object = field(repr=False)  # (n, p) array, transformed when Mahalanobis
    labels: np.ndarray = field(repr=False)
    build_time_cpu_s: float = 0.0
    _tree: object = field(default=None, repr=False)
    _kernel_distance: KernelDistance | None = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.labels)


def _auto_backend(metric, n, dim):
    if metric.kind == "kernel_induced":
        return "brute" if n < BRUTE_THRESHOLD else "vp_tree"
    if n < BRUTE_THRESHOLD:
        return "brute"
    return "kd_tree" if dim <= KD_MAX_DIM else "ball_tree"


def build_index(points, labels, metric: MetricSpec, backend=None, seed=0) -> NeighborIndex:
    """Build an exact neighbour index.

    For the Mahalanobis metric the points are transformed up front so a plain
    Euclidean tree applies; for the kernel-induced metric the points are
    descriptor objects and a generic-metric (vantage-point) tree or brute
    scan is used.
    """
    labels = np.asarray(labels, dtype=float)
    if len(points) == 0:
        raise ConfigError("cannot index an empty training set")
    if len(points) != len(labels):
        raise ShapeError("point count does not match label count")

    t0 = time.process_time()
    if metric.kind == "kernel_induced":
        dim = None
        stored = list(points)
        kd = KernelDistance(metric.kernel_params)
        backend = backend or _auto_backend(metric, len(points), 0)
        if backend not in ("vp_tree", "brute"):
            raise ConfigError(f"backend {backend!r} cannot handle a kernel-induced metric")
        tree = VpTree(stored, kd, seed=seed) if backend == "vp_tree" else None
        return NeighborIndex(
            backend=backend, metric=metric, points=stored, labels=labels,
            build_time_cpu_s=time.process_time() - t0, _tree=tree, _kernel_distance=kd,
        )

    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ShapeError("points must be a 2-D array")
    if metric.kind == "mahalanobis":
        pts = transform(metric.mlkr_transform, pts)
    backend = backend or _auto_backend(metric, len(pts), pts.shape[1])
    if backend == "kd_tree":
        tree = KDTree(pts)
    elif backend == "ball_tree":
        tree = BallTree(pts)
    elif backend == "vp_tree":
        tree = VpTree(pts, lambda a, b: float(np.linalg.norm(a - b)), seed=seed)
    elif backend == "brute":
        tree = None
    else:
        raise ConfigError(f"unknown backend {backend!r}")
    return NeighborIndex(
        backend=backend, metric=metric, points=pts, labels=labels,
        build_time_cpu_s=time.process_time() - t0, _tree=tree,
    )


def _prepare_query(index: NeighborIndex, x):
    if index.metric.kind == "mahalanobis":
        return transform(index.metric.mlkr_transform, np.asarray(x, dtype=float))
    if index.metric.kind == "euclidean":
        return np.asarray(x, dtype=float)
    return x


def _take_k(dists, idxs, k):
    """First k candidates under the (distance, index) ordering."""
    order = np.lexsort((idxs, dists))
    sel = order[:k]
    return dists[sel], idxs[sel]


def _sklearn_query(index, q, k):
    n = index.n
    kk = min(k + 1, n)
    while True:
        d, i = index._tree.query(q[None, :], k=kk)
        d, i = d[0], i[0].astype(int)
        # expand until the boundary is tie-free, so the index tie rule can apply
        if kk == n or d[k - 1] < d[kk - 1]:
            break
        kk = min(n, 2 * kk)
    return _take_k(d, i, k)


def query_knn(index: NeighborIndex, x, k) -> NeighborSet:
    """The k nearest training points; equal distances break toward the
    smaller training index."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    if k > index.n:
        warnings.warn(f"k={k} exceeds the {index.n} indexed points; clamping")
        k = index.n
    q = _prepare_query(index, x)

    if index.metric.kind == "kernel_induced":
        if index.backend == "brute":
            d = index._kernel_distance.matrix([q], index.points)[0]
            d, i = _take_k(d, np.arange(index.n), k)
        else:
            d, i = index._tree.query(q, k)
    elif index.backend == "brute":
        d = np.linalg.norm(index.points - q[None, :], axis=1)
        d, i = _take_k(d, np.arange(index.n), k)
    elif index.backend == "vp_tree":
        d, i = index._tree.query(q, k)
    else:
        d, i = _sklearn_query(index, q, k)
    return NeighborSet(indices=i, distances=d, labels=index.labels[i])


def knn_predict(ns: NeighborSet, weighting="uniform"):
    """Uniform mean or reciprocal-distance weighted mean of neighbour labels.

    Any neighbour within ZERO_DISTANCE_EPS of the query short-circuits to the
    mean label of the coincident points (reciprocal weights are singular there).
    """
    if len(ns) == 0:
        raise ConfigError("empty neighbour set")
    if weighting == "uniform":
        return float(np.mean(ns.labels))
    if weighting != "reciprocal_distance":
        raise ConfigError(f"unknown weighting {weighting!r}")
    zero = ns.distances <= ZERO_DISTANCE_EPS
    if np.any(zero):
        return float(np.mean(ns.labels[zero]))
    w = 1.0 / ns.distances
    return float(np.sum(w * ns.labels) / np.sum(w))


def _distance_matrix(points, metric: MetricSpec):
    if metric.kind == "kernel_induced":
        return KernelDistance(metric.kernel_params).matrix(list(points))
    pts = np.asarray(points, dtype=float)
    if metric.kind == "mahalanobis":
        pts = transform(metric.mlkr_transform, pts)
    return cdist(pts, pts)


def tune_k(points, labels, metric: MetricSpec, k_max, weighting="uniform"):
    """Leave-one-out MAE for every k <= k_max from one distance-matrix pass.

    Each point's own row excludes itself, so the result equals explicit
    per-point retraining exactly.  Returns (k_best, maes) with maes[k-1] the
    LOO MAE at k; ties prefer the smaller k.
    """
    labels = np.asarray(labels, dtype=float)
    n = len(labels)
    if n < 2:
        raise ConfigError("LOO tuning needs at least 2 points")
    if k_max >= n:
        raise ConfigError("k_max must be smaller than the number of points")
    D = _distance_matrix(points, metric)
    np.fill_diagonal(D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")[:, :k_max]
    maes = np.empty(k_max)
    preds = np.empty(n)
    for k in range(1, k_max + 1):
        for i in range(n):
            idx = order[i, :k]
            ns = NeighborSet(indices=idx, distances=D[i, idx], labels=labels[idx])
            preds[i] = knn_predict(ns, weighting)
        maes[k - 1] = np.mean(np.abs(preds - labels))
    k_best = int(np.argmin(maes)) + 1
    return k_best, maes


def predict_quantiles(ns: NeighborSet, qs):
    """Empirical quantiles (linear interpolation) of the unweighted neighbour
    labels."""
    qs = np.asarray(qs, dtype=float)
    if len(ns) == 0:
        raise ConfigError("empty neighbour set")
    if np.any(qs < 0) or np.any(qs > 1):
        raise ConfigError("quantiles must lie in [0, 1]")
    return np.quantile(ns.labels, qs)


def calibration_curve(quantile_predictions, true_labels, percentiles):
    """Empirical coverage per nominal percentile.

    quantile_predictions is (n_test, n_percentiles); coverage counts items
    whose true label is <= the predicted quantile (ties count as covered).
    """
    qp = np.asarray(quantile_predictions, dtype=float)
    y = np.asarray(true_labels, dtype=float)
    percentiles = np.asarray(percentiles, dtype=float)
    if qp.ndim != 2 or qp.shape[0] != len(y) or qp.shape[1] != len(percentiles):
        raise ShapeError("quantile predictions must be (n_test, n_percentiles)")
    coverage = np.mean(y[:, None] <= qp, axis=0)
    return [(float(p), float(c)) for p, c in zip(percentiles, coverage)]


def explain(ns: NeighborSet, dataset, prediction=None, quantiles=(0.25, 0.75)):
    """JSON-ready neighbour report: id, composition, distance and label per
    neighbour, plus the prediction and uncertainty quantiles."""
    rows = []
    for rank, (i, d, y) in enumerate(zip(ns.indices, ns.distances, ns.labels)):
        s = dataset.structures[int(i)]
        rows.append({
            "rank": rank,
            "train_index": int(i),
            "structure_id": s.id,
            "composition": s.composition,
            "distance": float(d),
            "label": float(y),
        })
    return {
        "neighbors": rows,
        "prediction": float(prediction) if prediction is not None else float(np.mean(ns.labels)),
        "quantiles": {str(q): float(v) for q, v in zip(quantiles, predict_quantiles(ns, list(quantiles)))},
    }


@dataclass
class KnnModel:
    index: NeighborIndex
    k: int = 10
    weighting: str = "reciprocal_distance"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be at least 1")

    def predict_one(self, x):
        return knn_predict(query_knn(self.index, x, self.k), self.weighting)

    def predict(self, X):
        if self.index.metric.kind == "kernel_induced":
            return np.array([self.predict_one(x) for x in X])
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.index.backend in ("kd_tree", "ball_tree") and self.k < self.index.n:
            return self._predict_batched(X)
        return np.array([self.predict_one(x) for x in X])

    def _predict_batched(self, X):
        """One tree query for the whole batch.

        Weighted means are invariant to neighbour ordering, so the index tie
        rule cannot change the prediction unless the tie sits on the k
        boundary; only those rows fall back to the per-query path.
        """
        index, k = self.index, self.k
        Q = _prepare_query(index, np.asarray(X, dtype=float))
        kk = min(k + 1, index.n)
        d, i = index._tree.query(Q, k=kk)
        boundary_tie = (d[:, k - 1] >= d[:, kk - 1]) if kk < index.n else np.zeros(len(Q), bool)
        dk = d[:, :k]
        labels = index.labels[i[:, :k]]
        if self.weighting == "uniform":
            out = labels.mean(axis=1)
        else:
            zero = dk <= ZERO_DISTANCE_EPS
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, dk))
                out = np.sum(w * labels, axis=1) / np.sum(w, axis=1)
            has_zero = zero.any(axis=1)
            if np.any(has_zero):
                counts = zero.sum(axis=1)
                sums = np.sum(np.where(zero, labels, 0.0), axis=1)
                out[has_zero] = sums[has_zero] / counts[has_zero]
        # tie rows: re-query the affected subset with a growing k until the
        # boundary is tie-free, then apply the (distance, index) rule
        rows = np.flatnonzero(boundary_tie)
        while len(rows):
            kk = min(index.n, 2 * kk)
            d2, i2 = index._tree.query(Q[rows], k=kk)
            resolved = (
                np.ones(len(rows), bool) if kk == index.n else d2[:, k - 1] < d2[:, kk - 1]
            )
            for rl in np.flatnonzero(resolved):
                dr, ir = _take_k(d2[rl], i2[rl].astype(int), k)
                ns = NeighborSet(indices=ir, distances=dr, labels=index.labels[ir])
                out[rows[rl]] = knn_predict(ns, self.weighting)
            rows = rows[~resolved]
        return out

    def save(self, path):
        with open(path, "wb") as fh:
            pickle.dump(self, fh)

    @staticmethod
    def load(path):
        with open(path, "rb") as fh:
            model = pickle.load(fh)
        if not isinstance(model, KnnModel):
            raise ConfigError(f"{path} does not contain a KnnModel")
        return model
