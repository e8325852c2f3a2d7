"""Metric-learned k-nearest-neighbour regression for molecular properties.

Descriptors, kernels, a KRR baseline, MLKR metric learning, exact
tree-accelerated k-NN with quantile uncertainty, and a cross-validation /
learning-curve harness.
"""

from .dataset import (
    FoldPlan,
    LabeledSet,
    Structure,
    make_delta_labels,
    make_folds,
    parse_xyz,
    subsample,
)
from .descriptors import (
    DescriptorParams,
    GlobalDescriptor,
    LmbParams,
    LocalDescriptor,
    bag_of_bonds,
    coulomb_matrix,
    global_pool,
    local_many_body,
)
from .kernels import (
    KernelParams,
    kernel_induced_distance,
    kernel_matrix,
    local_sum_kernel,
    normalize_kernel,
    rbf_kernel,
)
from .knn import (
    KnnModel,
    MetricSpec,
    NeighborIndex,
    NeighborSet,
    build_index,
    calibration_curve,
    explain,
    knn_predict,
    predict_quantiles,
    query_knn,
    tune_k,
)
from .krr import KrrModel, fit_krr, krr_grid_search, krr_predict, krr_train
from .mlkr import (
    MlkrConfig,
    MlkrTransform,
    kernel_regression_predict,
    mlkr_fit,
    mlkr_gradient,
    mlkr_loss,
    transform,
)
from .pipeline import (
    ExperimentConfig,
    ExperimentRecord,
    capture_timing,
    emit_results,
    run_cv_learning_curve,
    run_extrapolation,
    run_k_sweep,
)

__version__ = "0.1.0"
