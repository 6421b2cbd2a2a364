"""Gaussian-mixture measurement uncertainty for visual localization filters.

Modules:
    mixture     2D/1D Gaussian mixtures, condensation, marginal tail thresholds
    filters     unscented (sigma-point) filter and Gaussian sum filter
    gating      chi-square and mixture validation gates
    kse         keypoint-set network predicting measurement mixtures
    scenario    synthetic driving scenes with condition-dependent errors
    evaluation  calibration statistics, histograms, covariance credibility
    pipeline    end-to-end experiment harness used by the ``gmloc`` CLI
"""

from .mixture import GaussMix1, GaussMix2, Gaussian2, condense, marginalize, tail_threshold
from .filters import GsfBelief, StateBelief, gsf_update, spf_update_gm, ukf_predict, ukf_update
from .gating import chi2_threshold, gate_gaussian, gate_gm
from .kse import FrameContext, KseParams, TrainConfig, predict_measurement, train
from .scenario import ScenarioRecord, default_profiles, simulate
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "GaussMix1",
    "GaussMix2",
    "Gaussian2",
    "condense",
    "marginalize",
    "tail_threshold",
    "GsfBelief",
    "StateBelief",
    "gsf_update",
    "spf_update_gm",
    "ukf_predict",
    "ukf_update",
    "chi2_threshold",
    "gate_gaussian",
    "gate_gm",
    "FrameContext",
    "KseParams",
    "TrainConfig",
    "predict_measurement",
    "train",
    "ScenarioRecord",
    "default_profiles",
    "simulate",
    "PipelineConfig",
    "run_pipeline",
]
