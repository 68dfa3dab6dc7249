from .calibration import (
    CountDistribution,
    DistributionSet,
    HistogramAccumulator,
    PixelOrder,
    brightness_order,
    fit_distributions,
)
from .classify import (
    AdaptiveClassifier,
    BatchVerdicts,
    MLClassifier,
    NeighbourMLClassifier,
    RoiClassifier,
    ThresholdClassifier,
    ThresholdRule,
    Verdict,
    classify_adaptive,
    classify_iterative_neighbours,
    classify_ml,
    classify_spatiotemporal,
    classify_spatiotemporal_adaptive,
    classify_threshold,
)
from .core import (
    CalibrationError,
    ConfigError,
    FrameFormatError,
    IonState,
    ModelValidityError,
    OpticsError,
    ReadoutError,
    RegisterState,
)
from .emccd import CameraModel, ExcessNoiseMode, Frame, expose, expose_sequence
from .metrics import EpsilonReport, compute_epsilon, postselect, sweep_roi
from .optics import AiryPSF, GaussianPSF, ImagingModel, TabulatedPSF, crosstalk_fraction, pixel_rate_map
from .register_sim import DecayModel, TrialBatch, TrialProtocol, TrialRecord, run_trial, run_trial_batch
from .runtime import BatchRuntime, CancellationException, JobState

__all__ = [
    "AdaptiveClassifier",
    "AiryPSF",
    "BatchRuntime",
    "BatchVerdicts",
    "CalibrationError",
    "CameraModel",
    "CancellationException",
    "ConfigError",
    "CountDistribution",
    "DecayModel",
    "DistributionSet",
    "EpsilonReport",
    "ExcessNoiseMode",
    "Frame",
    "FrameFormatError",
    "GaussianPSF",
    "HistogramAccumulator",
    "ImagingModel",
    "IonState",
    "JobState",
    "MLClassifier",
    "ModelValidityError",
    "NeighbourMLClassifier",
    "OpticsError",
    "PixelOrder",
    "ReadoutError",
    "RegisterState",
    "RoiClassifier",
    "TabulatedPSF",
    "ThresholdClassifier",
    "ThresholdRule",
    "TrialBatch",
    "TrialProtocol",
    "TrialRecord",
    "Verdict",
    "brightness_order",
    "classify_adaptive",
    "classify_iterative_neighbours",
    "classify_ml",
    "classify_spatiotemporal",
    "classify_spatiotemporal_adaptive",
    "classify_threshold",
    "compute_epsilon",
    "crosstalk_fraction",
    "expose",
    "expose_sequence",
    "fit_distributions",
    "pixel_rate_map",
    "postselect",
    "run_trial",
    "run_trial_batch",
    "sweep_roi",
]
