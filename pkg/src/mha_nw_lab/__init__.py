"""mha_nw_lab: multi-head attention as an ensemble of kernel regressors.

A numerical laboratory that treats softmax attention heads as
Nadaraya-Watson estimators, measures the bias-variance-covariance
decomposition of their weighted ensembles on synthetic regression tasks,
and sweeps head geometry (diversity, weighting, dimension allocation).
"""

__version__ = "0.1.0"

from .arch_search import enumerate_allocations, scaling_trend, sweep_architectures
from .decomposition import (
    ExperimentPlan,
    FamilySpec,
    check_cov_bound,
    hdi_sweep,
    mc_decompose,
    theoretical_bias_variance,
    weighting_compare,
)
from .diversity import (
    cross_gram,
    hdi,
    load_weight_file,
    make_diversity_report,
    make_projection_family,
    optimize_projections,
    principal_angles,
)
from .mha import ProjectionSet, WeightScheme, make_weights, mha_estimate
from .nw_attention import AttentionOutput, HeadConfig, attend, attend_many, nw_reference
from .synthetic import (
    Dataset,
    RegressionTask,
    derive_seed,
    export_dataset_csv,
    make_task,
    sample_dataset,
    sample_queries,
)
from .tensor_core import Matrix, matmul, qr_orthonormalize, singular_values

__all__ = [
    "__version__",
    "Matrix", "matmul", "qr_orthonormalize", "singular_values",
    "RegressionTask", "Dataset", "make_task", "sample_dataset",
    "sample_queries", "derive_seed", "export_dataset_csv",
    "HeadConfig", "AttentionOutput", "attend", "attend_many", "nw_reference",
    "ProjectionSet", "WeightScheme", "make_weights", "mha_estimate",
    "cross_gram", "principal_angles", "hdi", "make_diversity_report",
    "make_projection_family", "optimize_projections", "load_weight_file",
    "ExperimentPlan", "FamilySpec", "mc_decompose", "theoretical_bias_variance",
    "check_cov_bound", "hdi_sweep", "weighting_compare",
    "enumerate_allocations", "sweep_architectures", "scaling_trend",
]
