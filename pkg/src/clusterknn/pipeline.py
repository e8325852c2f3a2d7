"""Experiment orchestration: cross-validated learning curves, extrapolation
splits, k sweeps, timing capture, and result emission."""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import krr as krr_mod
from .dataset import LabeledSet, make_delta_labels, make_folds, parse_xyz, subsample
from .descriptors import DescriptorParams, LmbParams, featurize, global_matrix, infer_padding
from .errors import ConfigError
from .kernels import KernelParams
from .knn import KnnModel, MetricSpec, build_index, tune_k
from .mlkr import MlkrConfig, kernel_regression_predict, mlkr_fit, transform

MODEL_NAMES = (
    "krr",
    "knn_euclidean",
    "knn_kernel_induced",
    "knn_mlkr",
    "kernel_regression_mlkr",
)

RESULT_COLUMNS = (
    "model",
    "train_size",
    "fold",
    "mae",
    "train_cpu_s",
    "predict_cpu_s",
    "hyperparameters",
)


@dataclass
class ExperimentConfig:
    dataset_path: str | None = None
    dataset_format: str = "plain"
    property_column: int | None = None
    label_unit: str = "kcal/mol"  # or "hartree" (converted at ingest)
    delta_learning: bool = False
    composition_pattern: str | None = None

    descriptor_kind: str = "LMB"
    lmb: dict = field(default_factory=dict)

    models: tuple = ("knn_mlkr",)
    train_sizes: tuple = (100,)
    k_cv: int = 5
    seed: int = 0
    out_dir: str | None = None

    sigma: float = 2.0  # kernel width for kernel-induced k-NN (and fixed-sigma KRR)
    krr_sigma_grid: tuple | None = None
    krr_lambda_grid: tuple | None = None
    krr_grid_train: int = 4000
    krr_grid_val: int = 1000
    krr_local: bool = True

    knn_k: int | None = None  # None: tune by LOO on a capped subsample
    k_max: int = 30
    k_tune_cap: int = 5000
    weighting: str = "reciprocal_distance"

    mlkr_p_out: int = 50
    mlkr_max_iter: int = 100
    mlkr_cap: int = 25_000

    extrapolation_composition: dict | None = None

    def __post_init__(self):
        for m in self.models:
            if m not in MODEL_NAMES:
                raise ConfigError(f"unknown model {m!r}; known: {MODEL_NAMES}")
        if not self.models:
            raise ConfigError("at least one model is required")

    @staticmethod
    def from_file(path):
        with open(path) as fh:
            raw = json.load(fh)
        return ExperimentConfig(**raw)

    def descriptor_params(self, structures=None):
        padding = {}
        if self.descriptor_kind in ("CM", "BoB") and structures is not None:
            padding = infer_padding(structures)
        return DescriptorParams(
            kind=self.descriptor_kind,
            max_atoms_per_element=padding,
            lmb=LmbParams(**self.lmb),
        )


@dataclass
class ExperimentRecord:
    model: str
    train_size: int
    fold: int
    mae: float
    train_cpu_s: float
    predict_cpu_s: float
    hyperparameters: dict = field(default_factory=dict)


def capture_timing(thunk):
    """Run a callable and return (result, process-CPU seconds).

    Process CPU time (time.process_time), not wall clock: sleeping costs
    nothing, sibling jobs do not interfere.  Resolution is the platform's
    process timer (typically ~1 us on Linux).
    """
    t0 = time.process_time()
    result = thunk()
    return result, time.process_time() - t0


def load_dataset(config: ExperimentConfig) -> LabeledSet:
    if config.dataset_path is None:
        raise ConfigError("config has no dataset_path")
    frames = parse_xyz(
        config.dataset_path,
        format=config.dataset_format,
        property_column=config.property_column,
        composition_pattern=config.composition_pattern,
    )
    structures = [s for s, _ in frames]
    labels = np.array([l if l is not None else np.nan for _, l in frames])
    if np.any(np.isnan(labels)):
        raise ConfigError("dataset frames are missing labels")
    if config.label_unit == "hartree":
        from .dataset import HARTREE_TO_KCALMOL

        labels = labels * HARTREE_TO_KCALMOL
    return LabeledSet(structures=structures, labels=labels)


def featurize_dataset(data: LabeledSet, config: ExperimentConfig):
    """Global matrix plus (for LMB) the per-structure local descriptors."""
    params = config.descriptor_params(data.structures)
    if params.kind == "LMB":
        locals_ = featurize(data.structures, params, pooled=False)
        from .descriptors import global_pool

        X = global_matrix([global_pool(d) for d in locals_])
        return {"global": X, "local": locals_}
    X = global_matrix(featurize(data.structures, params))
    return {"global": X, "local": None}


def save_features(feats, data: LabeledSet, config: ExperimentConfig, path):
    """Persist a featurized dataset (bit-exact reload) with a JSON sidecar
    recording descriptor parameters and the column layout."""
    arrays = {"global": feats["global"], "labels": data.labels}
    if feats["local"] is not None:
        for i, d in enumerate(feats["local"]):
            arrays[f"local_{i}"] = d.vectors
            arrays[f"elements_{i}"] = np.array(d.center_elements)
    np.savez(path, **arrays)
    sidecar = {
        "descriptor_kind": config.descriptor_kind,
        "lmb": config.lmb,
        "n_structures": len(data),
        "n_global_columns": int(feats["global"].shape[1]),
        "ids": [s.id for s in data.structures],
    }
    with open(str(path).removesuffix(".npz") + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_features(path):
    """Reload features written by save_features. Returns (feats, labels)."""
    from .descriptors import LocalDescriptor

    data = np.load(path if str(path).endswith(".npz") else str(path) + ".npz")
    n = data["global"].shape[0]
    locals_ = None
    if "local_0" in data:
        locals_ = [
            LocalDescriptor(data[f"local_{i}"], tuple(data[f"elements_{i}"]))
            for i in range(n)
        ]
    return {"global": data["global"], "local": locals_}, data["labels"]


def _audit_disjoint(stage, train_like, test_idx):
    overlap = set(map(int, train_like)) & set(map(int, test_idx))
    if overlap:
        raise ConfigError(f"test leakage in stage {stage!r}: indices {sorted(overlap)[:5]}...")


def _local_subset(locals_, idx):
    return [locals_[int(i)] for i in idx] if locals_ is not None else None


def _fit_predict(model, feats, y, train_idx, test_idx, config, fold_seed, audit=None):
    """Train one model on train_idx, predict test_idx.

    Returns (predictions, train_cpu_s, predict_cpu_s, hyperparameters).
    Every data-dependent stage (grid search, k tuning, MLKR fitting) draws
    only from train_idx; the audit dict records the index sets used.
    """
    Xg = feats["global"]
    y = np.asarray(y, dtype=float)
    y_train = y[train_idx]
    rng = np.random.default_rng(fold_seed)
    audit = audit if audit is not None else {}

    def note(stage, idx):
        audit.setdefault(stage, set()).update(map(int, idx))
        _audit_disjoint(stage, idx, test_idx)

    note("train", train_idx)

    if model == "krr":
        local = feats["local"] if config.krr_local and feats["local"] is not None else None
        descs_train = _local_subset(local, train_idx) or list(Xg[train_idx])
        descs_test = _local_subset(local, test_idx) or list(Xg[test_idx])
        n_grid = min(config.krr_grid_train, max(2, int(0.8 * len(train_idx))))
        n_val = min(config.krr_grid_val, max(1, len(train_idx) - n_grid))
        perm = rng.permutation(len(train_idx))
        gsel, vsel = perm[:n_grid], perm[n_grid : n_grid + n_val]
        note("krr_grid_search", train_idx[gsel])
        note("krr_grid_search", train_idx[vsel])
        sigma_grid = config.krr_sigma_grid or (
            krr_mod.DEFAULT_SIGMA_GRID_LOCAL if local is not None else krr_mod.DEFAULT_SIGMA_GRID_GLOBAL
        )
        lambda_grid = config.krr_lambda_grid or krr_mod.DEFAULT_LAMBDA_GRID
        sigma, lam = krr_mod.krr_grid_search(
            [descs_train[i] for i in gsel], y_train[gsel],
            [descs_train[i] for i in vsel], y_train[vsel],
            sigma_grid=sigma_grid, lambda_grid=lambda_grid,
            local_mode=local is not None,
        )
        params = KernelParams(sigma=sigma, local_mode=local is not None)
        fitted, train_t = capture_timing(lambda: krr_mod.fit_krr(descs_train, y_train, params, lam))
        preds, pred_t = capture_timing(lambda: krr_mod.krr_predict(fitted, descs_test))
        return preds, train_t, pred_t, {"sigma": sigma, "lambda": lam}

    if model in ("knn_mlkr", "kernel_regression_mlkr"):
        mlkr_config = MlkrConfig(
            p_out=config.mlkr_p_out,
            max_train_points=config.mlkr_cap,
            max_iter=config.mlkr_max_iter,
            seed=fold_seed,
        )
        note("mlkr_fit", train_idx)
        t, mlkr_t = capture_timing(lambda: mlkr_fit(Xg[train_idx], y_train, mlkr_config))
        if model == "kernel_regression_mlkr":
            preds, pred_t = capture_timing(
                lambda: kernel_regression_predict(t, Xg[train_idx], y_train, Xg[test_idx])
            )
            return preds, mlkr_t, pred_t, {"p_out": t.p_out}
        metric = MetricSpec(kind="mahalanobis", mlkr_transform=t)
        points, descs_test = Xg[train_idx], Xg[test_idx]
    elif model == "knn_euclidean":
        metric = MetricSpec(kind="euclidean")
        points, descs_test = Xg[train_idx], Xg[test_idx]
        mlkr_t = 0.0
    elif model == "knn_kernel_induced":
        metric = MetricSpec(
            kind="kernel_induced", kernel_params=KernelParams(sigma=config.sigma, local_mode=True)
        )
        local = feats["local"]
        if local is None:
            raise ConfigError("kernel-induced k-NN needs local descriptors (LMB)")
        points = _local_subset(local, train_idx)
        descs_test = _local_subset(local, test_idx)
        mlkr_t = 0.0
    else:
        raise ConfigError(f"unknown model {model!r}")

    k = config.knn_k
    if k is None:
        cap = min(config.k_tune_cap, len(train_idx))
        tune_sel = train_idx[rng.permutation(len(train_idx))[:cap]]
        note("k_tuning", tune_sel)
        tune_points = (
            _local_subset(feats["local"], tune_sel)
            if metric.kind == "kernel_induced"
            else Xg[tune_sel]
        )
        k, _ = tune_k(
            tune_points, y[tune_sel], metric,
            k_max=min(config.k_max, len(tune_sel) - 1),
            weighting=config.weighting,
        )

    index, build_t = capture_timing(
        lambda: build_index(points, y_train, metric, seed=fold_seed)
    )
    knn = KnnModel(index=index, k=k, weighting=config.weighting)
    preds, pred_t = capture_timing(lambda: knn.predict(descs_test))
    return preds, mlkr_t + build_t, pred_t, {"k": k, "weighting": config.weighting}


def _run_cv_fold(job):
    fold, test_idx, pool, config, feats, labels = job
    records = []
    for size in sorted(config.train_sizes):
        train_idx = subsample(pool, size, config.seed * 1000 + fold)
        for model in config.models:
            preds, train_t, pred_t, hp = _fit_predict(
                model, feats, labels, train_idx, test_idx, config,
                fold_seed=config.seed * 1000 + fold,
            )
            mae = float(np.mean(np.abs(preds - labels[test_idx])))
            records.append(ExperimentRecord(
                model=model, train_size=size, fold=fold, mae=mae,
                train_cpu_s=train_t, predict_cpu_s=pred_t, hyperparameters=hp,
            ))
    return records


def run_cv_learning_curve(config: ExperimentConfig, data: LabeledSet | None = None,
                          feats=None):
    """Per fold x train size x model: train, predict the held-out fold, record
    MAE and CPU times.  Test folds are fixed across learning-curve points and
    subsamples are nested across sizes."""
    if data is None:
        data = load_dataset(config)
    if feats is None:
        feats = featurize_dataset(data, config)
    n = len(data)
    folds = make_folds(n, config.k_cv, config.seed)
    max_pool = min(len(folds.train_indices(f)) for f in range(config.k_cv))
    bad = [s for s in config.train_sizes if s > max_pool]
    if bad:
        raise ConfigError(
            f"train sizes {bad} exceed the available pool; maximum feasible size is {max_pool}"
        )
    jobs = [(fold, folds.test_indices(fold), folds.train_indices(fold), config, feats, data.labels)
            for fold in range(config.k_cv)]
    workers = int(os.environ.get("CLUSTERKNN_WORKERS", "1"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool_exec:
            per_fold = list(pool_exec.map(_run_cv_fold, jobs))
    else:
        per_fold = [_run_cv_fold(j) for j in jobs]
    records = [r for fold_records in per_fold for r in fold_records]
    if config.out_dir:
        emit_results(records, config.out_dir)
    return records


def run_extrapolation(config: ExperimentConfig, holdout_filter, data: LabeledSet | None = None,
                      feats=None):
    """Hold out every structure matching the composition predicate, train on
    the rest at each learning-curve size, test on the full holdout.

    Returns (records, audit); audit maps each training stage to the index set
    it consumed, with the holdout provably excluded (leakage raises).
    """
    if data is None:
        data = load_dataset(config)
    if feats is None:
        feats = featurize_dataset(data, config)
    n = len(data)
    holdout = np.array([i for i in range(n) if holdout_filter(data.structures[i])], dtype=int)
    pool = np.array([i for i in range(n) if not holdout_filter(data.structures[i])], dtype=int)
    if len(holdout) == 0:
        raise ConfigError("extrapolation filter matched no structures")
    if len(pool) == 0:
        raise ConfigError("extrapolation filter matched everything; nothing to train on")
    bad = [s for s in config.train_sizes if s > len(pool)]
    if bad:
        raise ConfigError(
            f"train sizes {bad} exceed the pool; maximum feasible size is {len(pool)}"
        )
    records = []
    audit: dict = {}
    for size in sorted(config.train_sizes):
        train_idx = subsample(pool, size, config.seed)
        for model in config.models:
            preds, train_t, pred_t, hp = _fit_predict(
                model, feats, data.labels, train_idx, holdout, config,
                fold_seed=config.seed, audit=audit,
            )
            mae = float(np.mean(np.abs(preds - data.labels[holdout])))
            records.append(ExperimentRecord(
                model=model, train_size=size, fold=-1, mae=mae,
                train_cpu_s=train_t, predict_cpu_s=pred_t, hyperparameters=hp,
            ))
    audit_out = {
        "holdout_indices": sorted(map(int, holdout)),
        "stages": {stage: sorted(idx) for stage, idx in audit.items()},
    }
    for stage, idx in audit.items():
        _audit_disjoint(stage, idx, holdout)
    if config.out_dir:
        emit_results(records, config.out_dir)
        with open(os.path.join(config.out_dir, "audit.json"), "w") as fh:
            json.dump(audit_out, fh)
    return records, audit_out


def composition_filter(composition: dict):
    """Predicate matching structures whose composition equals the given dict."""

    def match(s):
        return s.composition == composition

    return match


def run_k_sweep(config: ExperimentConfig, k_values, train_sizes, data: LabeledSet | None = None,
                feats=None):
    """LOO MAE over a grid of (k, train size) for the first k-NN model in the
    config; emits the data behind a k-sensitivity plot."""
    if data is None:
        data = load_dataset(config)
    if feats is None:
        feats = featurize_dataset(data, config)
    model = next((m for m in config.models if m.startswith("knn")), "knn_euclidean")
    Xg = feats["global"]
    rows = []
    k_values = sorted(k_values)
    for size in sorted(train_sizes):
        idx = subsample(np.arange(len(data)), size, config.seed)
        y = data.labels[idx]
        if model == "knn_mlkr":
            t = mlkr_fit(Xg[idx], y, MlkrConfig(
                p_out=config.mlkr_p_out, max_train_points=config.mlkr_cap,
                max_iter=config.mlkr_max_iter, seed=config.seed))
            metric = MetricSpec(kind="mahalanobis", mlkr_transform=t)
            points = Xg[idx]
        elif model == "knn_kernel_induced":
            metric = MetricSpec(kind="kernel_induced",
                                kernel_params=KernelParams(sigma=config.sigma, local_mode=True))
            points = _local_subset(feats["local"], idx)
        else:
            metric = MetricSpec(kind="euclidean")
            points = Xg[idx]
        _, maes = tune_k(points, y, metric, k_max=max(k_values), weighting=config.weighting)
        for k in k_values:
            rows.append({"k": k, "train_size": size, "mae": float(maes[k - 1])})
    if config.out_dir:
        os.makedirs(os.path.join(config.out_dir, "plotdata"), exist_ok=True)
        _write_csv(os.path.join(config.out_dir, "plotdata", "k_sweep.csv"),
                   ("k", "train_size", "mae"), rows)
    return rows


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})


def emit_results(records, outdir):
    """results.csv (one record per row), summary.json (mean +- std MAE per
    model/size), and plotdata/learning_curve.csv."""
    if not records:
        raise ConfigError("no records to emit")
    os.makedirs(outdir, exist_ok=True)
    os.makedirs(os.path.join(outdir, "plotdata"), exist_ok=True)
    rows = []
    for r in records:
        d = asdict(r)
        d["hyperparameters"] = json.dumps(d["hyperparameters"], sort_keys=True)
        rows.append(d)
    _write_csv(os.path.join(outdir, "results.csv"), RESULT_COLUMNS, rows)

    groups: dict = {}
    for r in records:
        groups.setdefault((r.model, r.train_size), []).append(r.mae)
    summary = [
        {
            "model": model,
            "train_size": size,
            "mae_mean": float(np.mean(maes)),
            "mae_std": float(np.std(maes)),
            "n_folds": len(maes),
        }
        for (model, size), maes in sorted(groups.items())
    ]
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    _write_csv(
        os.path.join(outdir, "plotdata", "learning_curve.csv"),
        ("model", "train_size", "mae_mean", "mae_std", "n_folds"),
        summary,
    )


def load_results(path):
    """Read results.csv back into ExperimentRecords (round-trip of emit_results)."""
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(ExperimentRecord(
                model=row["model"],
                train_size=int(row["train_size"]),
                fold=int(row["fold"]),
                mae=float(row["mae"]),
                train_cpu_s=float(row["train_cpu_s"]),
                predict_cpu_s=float(row["predict_cpu_s"]),
                hyperparameters=json.loads(row["hyperparameters"]),
            ))
    return records


def write_calibration(curve, outdir, name="calibration.csv"):
    os.makedirs(os.path.join(outdir, "plotdata"), exist_ok=True)
    rows = [{"nominal": p, "empirical": c} for p, c in curve]
    _write_csv(os.path.join(outdir, "plotdata", name), ("nominal", "empirical"), rows)
