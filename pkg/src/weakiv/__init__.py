"""Estimation under weak identification in heteroskedastic linear IV models.

The package provides the data-generating benchmark, reduced-form fits
(OLS and feasible GLS on the stacked system), structural estimators,
a Rao-Blackwellization engine driven by counter-based random streams,
a normalization layer for rank-deficient first stages, and a seeded
parallel Monte Carlo harness with a CLI front end.
"""

from .core import (
    COND_CAP,
    Dataset,
    Dims,
    IdentificationMode,
    PSDFactorization,
    StructuralParams,
    left_inverse,
    plug_in_beta,
    psd_factor,
)
from .dgp import (
    DGPConfig,
    HeteroskedasticitySpec,
    InstrumentDesign,
    benchmark_design,
    benchmark_dgp,
    benchmark_spec,
    concentration_parameter,
    dgp_from_dict,
    dgp_to_dict,
    draw_dataset,
    load_dgp,
)
from .estimators import (
    OptimalWeights,
    StructuralEstimate,
    VarianceConvention,
    build_optimal_weights,
    fuller,
    mills_ratio,
    optimal_iv,
    tsls,
    tsls_from_fit,
    two_step_gmm,
    unbiased_scalar,
)
from .exceptions import (
    ConfigError,
    Degenerate,
    DimensionError,
    NonPSD,
    RankDeficient,
    WeakIVError,
)
from .harness import (
    EstimatorSpec,
    ExperimentConfig,
    ExperimentResult,
    HistogramSpec,
    default_estimators,
    experiment_from_dict,
    experiment_to_dict,
    export_result,
    gather_estimates,
    import_result,
    loss_metrics,
    run_experiment,
)
from .rao_blackwell import RBConfig, rao_blackwellize, rb_optimal_iv, rb_tsls
from .reduced_form import (
    CellPartition,
    NoiseModel,
    ReducedFormFit,
    StackedSystem,
    estimate_cell_covariance,
    fgls_reduced_form,
    join_psi,
    noise_covariance,
    ols_reduced_form,
    split_psi,
)
from .singular import (
    BlockFit,
    NormalizedModel,
    apply_normalization,
    block_tsls,
    normalize_model,
)
from .streams import Stream, root_stream

__version__ = "0.1.0"

__all__ = [
    "COND_CAP",
    "BlockFit",
    "CellPartition",
    "ConfigError",
    "DGPConfig",
    "Dataset",
    "Degenerate",
    "DimensionError",
    "Dims",
    "EstimatorSpec",
    "ExperimentConfig",
    "ExperimentResult",
    "HeteroskedasticitySpec",
    "HistogramSpec",
    "IdentificationMode",
    "InstrumentDesign",
    "NoiseModel",
    "NonPSD",
    "NormalizedModel",
    "OptimalWeights",
    "PSDFactorization",
    "RBConfig",
    "RankDeficient",
    "ReducedFormFit",
    "StackedSystem",
    "Stream",
    "StructuralEstimate",
    "StructuralParams",
    "VarianceConvention",
    "WeakIVError",
    "apply_normalization",
    "benchmark_design",
    "benchmark_dgp",
    "benchmark_spec",
    "block_tsls",
    "build_optimal_weights",
    "concentration_parameter",
    "default_estimators",
    "dgp_from_dict",
    "dgp_to_dict",
    "draw_dataset",
    "estimate_cell_covariance",
    "experiment_from_dict",
    "experiment_to_dict",
    "export_result",
    "fgls_reduced_form",
    "fuller",
    "gather_estimates",
    "import_result",
    "join_psi",
    "left_inverse",
    "load_dgp",
    "loss_metrics",
    "mills_ratio",
    "noise_covariance",
    "normalize_model",
    "ols_reduced_form",
    "optimal_iv",
    "plug_in_beta",
    "psd_factor",
    "rao_blackwellize",
    "rb_optimal_iv",
    "rb_tsls",
    "root_stream",
    "run_experiment",
    "split_psi",
    "tsls",
    "tsls_from_fit",
    "two_step_gmm",
    "unbiased_scalar",
]
