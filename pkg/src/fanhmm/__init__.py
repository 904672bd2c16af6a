"""Feedback-augmented non-homogeneous hidden Markov models for panel data.

Categorical responses evolve over hidden states whose initial, transition,
and emission probabilities are multinomial-logit functions of covariates and,
optionally, of the previous response. The package fits such models by direct
penalized maximum likelihood or EM, evaluates interventional response
distributions by replaying the forward recursion with modified covariates,
and wraps the bootstrap machinery needed for interval estimates.
"""

from .causal import (
    AceResult,
    BootstrapDraws,
    BootstrapResult,
    CausalEstimate,
    InterventionPlan,
    ace,
    align_states,
    bootstrap_ci,
    bootstrap_effect_draws,
    estimate_do,
)
from .data import (
    DataSchema,
    build_design,
    design_from_schema,
    example_data_path,
    example_schema,
    load_dataset,
    model_spec_from_schema,
    write_dataset,
)
from .design import ColumnDef, DesignInfo, make_design_info
from .errors import (
    FanHmmError,
    InitializationError,
    UnsupportedCaseError,
    ValidationError,
)
from .estimation import FitOptions, FitResult, StartOutcome, fit, sample_initial_values
from .estimator import FanHmmEstimator
from .inference import backward, estep, forward, loglik_and_gradient, loglik_dataset
from .model import (
    MISSING,
    CoefficientSet,
    ModelSpec,
    PanelDataset,
    emission_matrix,
    initial_probs,
    model_from_dict,
    model_to_dict,
    pack_params,
    permute_states,
    transition_matrix,
    unpack_params,
)
from .simulate import (
    DgpConfig,
    ExperimentReport,
    benchmark_dgp,
    benchmark_model,
    benchmark_tables,
    covariate_process,
    generate_covariate_ar,
    intercept_benchmark_model,
    rng_stream,
    run_multistart_experiment,
    run_rmse_coverage_experiment,
    simulate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "MISSING",
    "ModelSpec",
    "CoefficientSet",
    "PanelDataset",
    "ColumnDef",
    "DesignInfo",
    "make_design_info",
    "initial_probs",
    "transition_matrix",
    "emission_matrix",
    "pack_params",
    "unpack_params",
    "permute_states",
    "model_to_dict",
    "model_from_dict",
    "forward",
    "backward",
    "estep",
    "loglik_dataset",
    "loglik_and_gradient",
    "fit",
    "FitOptions",
    "FitResult",
    "StartOutcome",
    "sample_initial_values",
    "InterventionPlan",
    "CausalEstimate",
    "AceResult",
    "BootstrapDraws",
    "BootstrapResult",
    "estimate_do",
    "ace",
    "align_states",
    "bootstrap_ci",
    "bootstrap_effect_draws",
    "DgpConfig",
    "ExperimentReport",
    "simulate_dataset",
    "generate_covariate_ar",
    "covariate_process",
    "rng_stream",
    "benchmark_tables",
    "benchmark_model",
    "intercept_benchmark_model",
    "benchmark_dgp",
    "run_multistart_experiment",
    "run_rmse_coverage_experiment",
    "DataSchema",
    "load_dataset",
    "write_dataset",
    "build_design",
    "design_from_schema",
    "model_spec_from_schema",
    "example_data_path",
    "example_schema",
    "FanHmmEstimator",
    "FanHmmError",
    "ValidationError",
    "UnsupportedCaseError",
    "InitializationError",
]
