"""Design and analysis of two-stage (cluster, then unit) randomized experiments."""

from .core import (
    ClusterRecord,
    ExperimentPanel,
    TupleStructure,
    UnitRecord,
    ValidationReport,
    read_panel_csv,
    validate_panel,
    write_panel_csv,
)
from .estimate import (
    adjusted_outcomes,
    cluster_averages,
    covariate_adjusted_estimate,
    point_estimates,
)
from .randomize import (
    FirstStageDesign,
    SecondStageDesign,
    assign_first_stage,
    assign_second_stage,
    complete_randomize,
    match_tuples,
    stratified_block_assign,
)
from .regress import RegressionSpec, cluster_robust_v, ols_inference
from .simulate import DgpConfig, SimConfig, generate_population, run_mc_grid
from .variance import (
    adjusted_t_test,
    covariate_adjusted_variance,
    v_hat_large_strata,
    v_hat_small_strata,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterRecord",
    "ExperimentPanel",
    "TupleStructure",
    "UnitRecord",
    "ValidationReport",
    "read_panel_csv",
    "validate_panel",
    "write_panel_csv",
    "adjusted_outcomes",
    "cluster_averages",
    "covariate_adjusted_estimate",
    "point_estimates",
    "FirstStageDesign",
    "SecondStageDesign",
    "assign_first_stage",
    "assign_second_stage",
    "complete_randomize",
    "match_tuples",
    "stratified_block_assign",
    "RegressionSpec",
    "cluster_robust_v",
    "ols_inference",
    "DgpConfig",
    "SimConfig",
    "generate_population",
    "run_mc_grid",
    "adjusted_t_test",
    "covariate_adjusted_variance",
    "v_hat_large_strata",
    "v_hat_small_strata",
]
