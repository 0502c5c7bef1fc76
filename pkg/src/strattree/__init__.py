"""Two-wave adaptive randomization with stratification trees.

A pilot experiment is used to fit a tree partition of the covariate space
together with per-stratum assignment targets; the second wave is then
randomized within those strata and the average effect is estimated with a
stratified estimator.
"""

__version__ = "0.1.0"

from .assign import AssignmentPlan, assign_sbr, assign_simple, sbr_counts
from .core import (
    ConfigError,
    CovariateSpace,
    Cut,
    Dimension,
    DomainError,
    EAConfig,
    FitConfig,
    Leaf,
    Sample,
    Split,
    StratificationTree,
    StratTreeError,
    StructureError,
    canonical_labels,
    candidate_thresholds,
    stratum_of,
    tree_distance,
)
from .cv import CvReport, cv_fit
from .estimate import (
    EstimateResult,
    EstimationError,
    SubgroupEstimates,
    estimate_ate,
    estimate_ate_sfe,
    estimate_pooled,
    estimate_subgroups,
    fit_subgroup_tree,
)
from .multi import EOptimalObjective, e_optimal_objective, empirical_variance_matrix, estimate_ate_multi
from .objective import (
    VarianceObjective,
    empirical_variance,
    neyman_allocation,
    optimize_leaf_proportions,
    population_variance,
)
from .search import BudgetExceeded, FitReport, exhaustive_search, fit, generate_population, vary

__all__ = [name for name in dir() if not name.startswith("_")]
