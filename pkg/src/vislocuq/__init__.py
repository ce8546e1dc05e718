"""Uncertainty quantification for retrieval-based visual localization.

Per-database sensor error models map keypoint-match counts to calibrated
error bounds and covariances; an unscented Kalman filter consumes them.
"""

from .core import Frame, Pose2, Traversal, psd_repair, rotate_cov, wrap_angle
from .errormodel import (
    BinnedErrorModel,
    CalibrationSample,
    ErrorModelSet,
    bin_index,
    cross_validate,
    empirical_sigma,
    fit_model,
)
from .evaluation import (
    ConstantCovarianceBaseline,
    EvalReport,
    ReliabilityCurve,
    covariance_credibility,
    reliability,
    run_experiment,
)
from .matcher import MatchOutcome, SyntheticMatcher, SyntheticMatcherConfig
from .retrieval import Prediction, RetrievalConfig, RetrievalLocalizer, predict_location
from .synth import CorruptionSpec, make_paper_scenario
from .ukf import FilterState, GateConfig, Measurement, UnscentedLocalizer, UtParams

__version__ = "0.1.0"

__all__ = [
    "BinnedErrorModel",
    "CalibrationSample",
    "ConstantCovarianceBaseline",
    "CorruptionSpec",
    "ErrorModelSet",
    "EvalReport",
    "FilterState",
    "Frame",
    "GateConfig",
    "MatchOutcome",
    "Measurement",
    "Pose2",
    "Prediction",
    "ReliabilityCurve",
    "RetrievalConfig",
    "RetrievalLocalizer",
    "SyntheticMatcher",
    "SyntheticMatcherConfig",
    "Traversal",
    "UnscentedLocalizer",
    "UtParams",
    "bin_index",
    "covariance_credibility",
    "cross_validate",
    "empirical_sigma",
    "fit_model",
    "make_paper_scenario",
    "predict_location",
    "psd_repair",
    "reliability",
    "rotate_cov",
    "run_experiment",
    "wrap_angle",
]
