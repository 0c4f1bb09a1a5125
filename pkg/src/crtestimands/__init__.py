"""Causal estimands and estimators for cluster-randomized trials."""

from .analysis import AnalysisGrid, AnalysisOptions, analyze
from .core import (
    Averaging,
    BoundaryPolicy,
    BoundednessError,
    ClusterRecord,
    ConvergenceError,
    CRTError,
    DegenerateArmError,
    EstimandSpec,
    EstimateResult,
    EstimationError,
    InestimableVarianceError,
    Margin,
    Measure,
    ObservedDataset,
    OutcomeKind,
    PotentialClusterRecord,
    PotentialOutcomeDataset,
    RankDeficiencyError,
    SeparationError,
    UndefinedEstimandError,
    ValidationError,
    Weighting,
    summarize_clusters,
)
from .engine import HC0, Correction, Link, SandwichSpec, cluster_robust_vcov, fit_working_glm
from .estimands import (
    all_estimands,
    cluster_specific_estimand,
    estimand_value,
    marginal_estimand,
    precision_weighted_estimand,
)
from .gee import gee_exchangeable_fit, gee_fit
from .iee import iee_estimate
from .io import load_config, load_observed_csv, load_potential_csv, write_observed_csv, write_potential_csv
from .mixed import glmm_logit_fit, implied_lmm_target, lmm_fit
from .simulation import DgpConfig, StudyReport, generate, run_study, superpopulation_truth
from .summaries import (
    cluster_specific_summary_estimate,
    huber_white_vcov,
    marginal_summary_estimate,
)

__version__ = "0.1.0"
