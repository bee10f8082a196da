"""Covariate-calibrated effect estimation for matched-pair cluster-randomized trials."""

__version__ = "0.1.0"

from .analysis import AnalysisConfig, AnalysisReport, run_analysis  # noqa: E402
from .calibration import CalibratedEstimates, calibrate_study, calibrated_mean, pooled_distribution  # noqa: E402
from .core import (  # noqa: E402
    ArmRole,
    ClusterArm,
    CovariateSchema,
    Pair,
    PairSummary,
    PatientRecord,
    Study,
    SummaryKind,
    crude_summaries,
    validate_study,
)
from .diagnostics import dependence_check, imbalance_report  # noqa: E402
from .estimators import (  # noqa: E402
    BayesConfig,
    EffectEstimate,
    bayes_uniform_shrinkage,
    first_level_mle,
    profile_mle,
    two_level_mle,
)
from .glm import CovType, LinkFunction, build_design, fit  # noqa: E402
from .io import guided_care_summaries, guided_care_table1, load_patient_csv, load_summary_data  # noqa: E402
from .permutation import permute_exact, permute_monte_carlo, permute_refit  # noqa: E402
from .report import emit_report  # noqa: E402
from .result1 import Result1Config, plim_mle, simulate_mle  # noqa: E402

__all__ = [
    "AnalysisConfig", "AnalysisReport", "run_analysis",
    "CalibratedEstimates", "calibrate_study", "calibrated_mean", "pooled_distribution",
    "ArmRole", "ClusterArm", "CovariateSchema", "Pair", "PairSummary", "PatientRecord", "Study", "SummaryKind",
    "crude_summaries", "validate_study",
    "dependence_check", "imbalance_report",
    "BayesConfig", "EffectEstimate", "bayes_uniform_shrinkage", "first_level_mle", "profile_mle", "two_level_mle",
    "CovType", "LinkFunction", "build_design", "fit",
    "guided_care_summaries", "guided_care_table1", "load_patient_csv", "load_summary_data",
    "permute_exact", "permute_monte_carlo", "permute_refit",
    "emit_report",
    "Result1Config", "plim_mle", "simulate_mle",
]
