"""Cross-validated posterior predictive checks for two-level hierarchical models."""

from .calibration import (
    HeavyTailLevel2,
    InflateGroup,
    PlantOutlier,
    PValueSample,
    ScenarioSpec,
    ShiftGroup,
    calibration_run,
    power_estimate,
    simulate_dataset,
    uniformity_stats,
)
from .checks import (
    POPULATION,
    CheckConfig,
    CheckReport,
    bonferroni_adjust,
    cv_ppc_group,
    cv_ppc_report,
    ppc_report,
    tail_probability,
)
from .discrepancy import Kind, depends_on, eval_group, eval_population
from .loo import cv_ppc_fast, loo_weights, marginal_group_loglik
from .model import (
    Dataset,
    DataError,
    GroupData,
    ModelSpec,
    ParamState,
    loglik_level1,
    loglik_level2,
    read_dataset,
    validate_dataset,
)
from .sampler import PosteriorChain, ProprietyError, SamplerConfig, fit_posterior

__version__ = "0.1.0"

__all__ = [
    "HeavyTailLevel2",
    "InflateGroup",
    "PlantOutlier",
    "PValueSample",
    "ScenarioSpec",
    "ShiftGroup",
    "calibration_run",
    "power_estimate",
    "simulate_dataset",
    "uniformity_stats",
    "POPULATION",
    "CheckConfig",
    "CheckReport",
    "bonferroni_adjust",
    "cv_ppc_group",
    "cv_ppc_report",
    "ppc_report",
    "tail_probability",
    "Kind",
    "depends_on",
    "eval_group",
    "eval_population",
    "cv_ppc_fast",
    "loo_weights",
    "marginal_group_loglik",
    "Dataset",
    "DataError",
    "GroupData",
    "ModelSpec",
    "ParamState",
    "loglik_level1",
    "loglik_level2",
    "read_dataset",
    "validate_dataset",
    "PosteriorChain",
    "ProprietyError",
    "SamplerConfig",
    "fit_posterior",
]
