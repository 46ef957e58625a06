"""Outcome-dependent subsampling of longitudinal cohorts.

Linear mixed model estimation, coarsened-summary sampling designs, the
ascertainment-corrected likelihood (complete-data analysis), two multiple
imputation strategies, and a replication study harness with a CLI front end.
"""

from .lmm import Cohort, FitResult, ModelSpec, Subject, Theta, fit_ml, loglik, marginal_cov
from .design import (
    DesignSpec,
    Region,
    SummarySpec,
    bivariate_central_region,
    calibrate_probabilities,
    compute_summary,
    draw_sample,
    empirical_cutoffs,
    population_cutoffs,
)
from .acl import QMoments, acl_loglik, fit_cd, log_ascertainment, q_moments
from .mi import (
    ExposureModel,
    MIResult,
    ascertainment_log_ratio,
    cdmi_impute,
    dmi_features,
    dmi_impute,
    fit_marginal_exposure,
    response_density_log_ratio,
    rubin_combine,
    run_mi_analysis,
)
from .simulate import (
    ANALYSIS_KINDS,
    DESIGN_KINDS,
    PRESETS,
    EfficiencyReport,
    Scenario,
    StudyConfig,
    end_of_study_mean,
    generate_cohort,
    run_replication,
    run_study,
)
from .cohort_io import read_cohort, write_cohort

__version__ = "0.1.0"

__all__ = [
    "ANALYSIS_KINDS",
    "DESIGN_KINDS",
    "PRESETS",
    "Cohort",
    "DesignSpec",
    "EfficiencyReport",
    "ExposureModel",
    "FitResult",
    "MIResult",
    "ModelSpec",
    "QMoments",
    "Region",
    "Scenario",
    "StudyConfig",
    "Subject",
    "SummarySpec",
    "Theta",
    "acl_loglik",
    "ascertainment_log_ratio",
    "bivariate_central_region",
    "calibrate_probabilities",
    "cdmi_impute",
    "compute_summary",
    "dmi_features",
    "dmi_impute",
    "draw_sample",
    "empirical_cutoffs",
    "end_of_study_mean",
    "fit_cd",
    "fit_marginal_exposure",
    "fit_ml",
    "generate_cohort",
    "log_ascertainment",
    "loglik",
    "marginal_cov",
    "population_cutoffs",
    "q_moments",
    "read_cohort",
    "response_density_log_ratio",
    "rubin_combine",
    "run_mi_analysis",
    "run_replication",
    "run_study",
    "write_cohort",
]
