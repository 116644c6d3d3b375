"""Estimation of optimal adaptive and partially adaptive treatment strategies.

A partially adaptive strategy tailors each treatment decision to a chosen
subset of the patient history. The package provides eight estimators of the
stage-specific decision rules (dynamic weighted OLS and G-estimation, each
plain, inverse-probability reweighted, or marginalized by integration /
conditional expectation), bootstrap inference including a data-adaptive
m-out-of-n procedure for near-nonregular two-stage problems, a simulation
harness, and a CSV/YAML-driven command line interface.
"""

from __future__ import annotations

from .analysis import AnalysisConfig, AnalysisReport, load_config, load_dataset, run_analysis
from .errors import (
    EstimationError,
    InferenceError,
    PatsError,
    PositivityError,
    RankDeficiencyError,
    SeparationError,
    SpecificationError,
    UnsupportedFeatureError,
)
from .estimators import EstimatorKind, PseudoOutcome, StageFit, fit
from .inference import (
    BootstrapConfig,
    BootstrapMode,
    InferenceResult,
    adaptive_mn_bootstrap,
    bootstrap_inference,
    choose_m,
    estimate_nonregularity,
    plain_bootstrap,
)
from .model import (
    BlipCoefficients,
    BlipKind,
    Stage,
    StagedDataset,
    StageSpec,
    TermList,
    blip_value,
    optimal_decision,
)
from .simulation import (
    SCENARIO_NAMES,
    SimReport,
    SimScenario,
    analysis_specs,
    generate,
    run_replications,
    scenario,
    true_pats_parameters,
)
from .weights import (
    WeightKind,
    WeightVector,
    balancing_weights,
    censoring_weights,
    iptw_weights,
    ratio_weights,
)

__all__ = [
    "AnalysisConfig",
    "AnalysisReport",
    "BlipCoefficients",
    "BlipKind",
    "BootstrapConfig",
    "BootstrapMode",
    "EstimationError",
    "EstimatorKind",
    "InferenceError",
    "InferenceResult",
    "PatsError",
    "PositivityError",
    "PseudoOutcome",
    "RankDeficiencyError",
    "SCENARIO_NAMES",
    "SeparationError",
    "SimReport",
    "SimScenario",
    "SpecificationError",
    "Stage",
    "StagedDataset",
    "StageFit",
    "StageSpec",
    "TermList",
    "UnsupportedFeatureError",
    "WeightKind",
    "WeightVector",
    "adaptive_mn_bootstrap",
    "analysis_specs",
    "balancing_weights",
    "blip_value",
    "bootstrap_inference",
    "censoring_weights",
    "choose_m",
    "estimate_nonregularity",
    "fit",
    "generate",
    "iptw_weights",
    "load_config",
    "load_dataset",
    "optimal_decision",
    "plain_bootstrap",
    "ratio_weights",
    "run_analysis",
    "run_replications",
    "scenario",
    "true_pats_parameters",
]

__version__ = "0.1.0"
