"""Doubly robust cross-fitted treatment effect estimation for clustered data."""
from .covariance import BetaModel, StrataSpec, beta_objective, default_strata, fit_beta_stratified
from .data import (
    ClusterData,
    DataError,
    Dataset,
    FoldAssignment,
    load_dataset,
    split_clusters,
    validate_dataset,
    write_csv,
)
from .dgp import TRUE_ATE, SimConfig, simulate_dgp
from .diagnostics import balance_tstats, overlap_diagnostic
from .estimators import (
    AggregateEstimate,
    CrossfitEstimate,
    MultilevelDR,
    confidence_interval,
    estimate,
    influence_aipw,
    influence_proposed,
    median_aggregate,
    subgroup_effect,
)
from .learners import LearnerSpec
from .nuisance import NuisanceFit, fit_nuisances
from .simlab import (
    EstimatorConfig,
    MetricsTable,
    efficiency_sweep,
    icc_binary_anova,
    icc_continuous,
    run_monte_carlo,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateEstimate", "BetaModel", "ClusterData", "CrossfitEstimate", "DataError", "Dataset",
    "EstimatorConfig", "FoldAssignment", "LearnerSpec", "MetricsTable", "MultilevelDR",
    "NuisanceFit", "SimConfig", "StrataSpec", "TRUE_ATE", "balance_tstats", "beta_objective",
    "confidence_interval", "default_strata", "efficiency_sweep", "estimate", "fit_beta_stratified",
    "fit_nuisances", "icc_binary_anova", "icc_continuous", "influence_aipw", "influence_proposed",
    "load_dataset", "median_aggregate", "overlap_diagnostic", "run_monte_carlo", "simulate_dgp",
    "split_clusters", "subgroup_effect", "validate_dataset", "write_csv",
]
