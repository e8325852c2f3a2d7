"""Batch command-line interface.

Worker count for fold-level parallelism is read from CLUSTERKNN_WORKERS.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .dataset import LabeledSet, parse_xyz
from .errors import ClusterKnnError
from .kernels import KernelParams
from .knn import KnnModel, MetricSpec, build_index, explain, query_knn
from .krr import KrrModel, fit_krr
from .mlkr import MlkrConfig, mlkr_fit
from .pipeline import (
    ExperimentConfig,
    composition_filter,
    emit_results,
    featurize_dataset,
    load_dataset,
    run_cv_learning_curve,
    run_extrapolation,
    run_k_sweep,
    save_features,
)


def _add_common(p):
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--models", nargs="+", default=None, help="override the model list")
    p.add_argument("--sizes", nargs="+", type=int, default=None, help="override train sizes")
    p.add_argument("--out", default=None, help="override the output directory")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "models", None):
        overrides["models"] = tuple(args.models)
    if getattr(args, "sizes", None):
        overrides["train_sizes"] = tuple(args.sizes)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


def cmd_featurize(args):
    cfg = _load_config(args)
    data = load_dataset(cfg)
    feats = featurize_dataset(data, cfg)
    out = args.out or "features.npz"
    save_features(feats, data, cfg, out)
    print(f"wrote {out} ({feats['global'].shape[0]} structures, "
          f"{feats['global'].shape[1]} global columns)")


def cmd_train(args):
    cfg = _load_config(args)
    data = load_dataset(cfg)
    feats = featurize_dataset(data, cfg)
    model = cfg.models[0]
    out = args.out or f"{model}.model"
    if model == "krr":
        descs = feats["local"] if cfg.krr_local and feats["local"] else list(feats["global"])
        params = KernelParams(sigma=cfg.sigma, local_mode=feats["local"] is not None and cfg.krr_local)
        fit_krr(descs, data.labels, params, lam=1e-8).save(out)
    elif model in ("knn_euclidean", "knn_mlkr"):
        if model == "knn_mlkr":
            t = mlkr_fit(feats["global"], data.labels, MlkrConfig(
                p_out=cfg.mlkr_p_out, max_train_points=cfg.mlkr_cap,
                max_iter=cfg.mlkr_max_iter, seed=cfg.seed))
            metric = MetricSpec(kind="mahalanobis", mlkr_transform=t)
        else:
            metric = MetricSpec(kind="euclidean")
        index = build_index(feats["global"], data.labels, metric, seed=cfg.seed)
        KnnModel(index=index, k=cfg.knn_k or 10, weighting=cfg.weighting).save(out)
    elif model == "knn_kernel_induced":
        metric = MetricSpec(kind="kernel_induced",
                            kernel_params=KernelParams(sigma=cfg.sigma, local_mode=True))
        index = build_index(feats["local"], data.labels, metric, seed=cfg.seed)
        KnnModel(index=index, k=cfg.knn_k or 10, weighting=cfg.weighting).save(out)
    else:
        raise ClusterKnnError(f"cannot train a standalone {model!r} artifact")
    print(f"wrote {out}")


def _query_features(cfg, path):
    from dataclasses import replace

    qcfg = replace(cfg, dataset_path=path, dataset_format="plain", property_column=None)
    frames = parse_xyz(path, format="plain", composition_pattern=cfg.composition_pattern)
    structures = [s for s, _ in frames]
    data = LabeledSet(structures=structures, labels=np.zeros(len(structures)))
    return data, featurize_dataset(data, qcfg)


def cmd_predict(args):
    cfg = _load_config(args)
    _, feats = _query_features(cfg, args.xyz)
    try:
        model = KnnModel.load(args.model_file)
        queries = feats["local"] if model.index.metric.kind == "kernel_induced" else feats["global"]
        preds = model.predict(queries)
    except ClusterKnnError:
        model = KrrModel.load(args.model_file)
        from .krr import krr_predict

        descs = feats["local"] if model.kernel_params.local_mode else list(feats["global"])
        preds = krr_predict(model, descs)
    for p in preds:
        print(f"{p:.6f}")


def cmd_cv(args):
    cfg = _load_config(args)
    records = run_cv_learning_curve(cfg)
    _print_records(records)


def cmd_tune_k(args):
    cfg = _load_config(args)
    rows = run_k_sweep(cfg, k_values=args.k_values, train_sizes=list(cfg.train_sizes))
    for r in rows:
        print(f"k={r['k']:3d} n={r['train_size']:6d} mae={r['mae']:.4f}")


def cmd_extrapolate(args):
    cfg = _load_config(args)
    if cfg.extrapolation_composition is None:
        raise ClusterKnnError("config has no extrapolation_composition")
    records, audit = run_extrapolation(cfg, composition_filter(cfg.extrapolation_composition))
    _print_records(records)
    print(f"holdout size: {len(audit['holdout_indices'])}")


def cmd_explain(args):
    cfg = _load_config(args)
    model = KnnModel.load(args.model_file)
    data = load_dataset(cfg)
    _, feats = _query_features(cfg, args.xyz)
    queries = feats["local"] if model.index.metric.kind == "kernel_induced" else feats["global"]
    reports = []
    for q in queries:
        ns = query_knn(model.index, q, model.k)
        reports.append(explain(ns, data))
    print(json.dumps(reports, indent=2))


def _print_records(records):
    for r in records:
        print(f"{r.model:24s} n={r.train_size:6d} fold={r.fold:2d} "
              f"mae={r.mae:.4f} train={r.train_cpu_s:.2f}s predict={r.predict_cpu_s:.2f}s")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="clusterknn",
                                     description="Metric-learned k-NN regression for molecular properties")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="compute and persist descriptors")
    _add_common(p)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("train", help="train one model on the full dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="predict labels for an XYZ file")
    _add_common(p)
    p.add_argument("--model-file", required=True)
    p.add_argument("--xyz", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("cv", help="cross-validated evaluation")
    _add_common(p)
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("learning-curve", help="cross-validated learning curve")
    _add_common(p)
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("tune-k", help="LOO MAE over a k grid")
    _add_common(p)
    p.add_argument("--k-values", nargs="+", type=int, default=list(range(1, 31)))
    p.set_defaults(fn=cmd_tune_k)

    p = sub.add_parser("extrapolate", help="hold out a composition class and extrapolate")
    _add_common(p)
    p.set_defaults(fn=cmd_extrapolate)

    p = sub.add_parser("explain", help="neighbour report for query structures")
    _add_common(p)
    p.add_argument("--model-file", required=True)
    p.add_argument("--xyz", required=True)
    p.set_defaults(fn=cmd_explain)

    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except ClusterKnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
