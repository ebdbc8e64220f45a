"""Sliding-window radar odometry with a constant-acceleration prior on SE(3)."""

from .errors import (
    DataFormatError,
    DivergenceError,
    LogBranchError,
    MagnusOdomError,
    SingularSystemError,
    TooShortError,
)
from .estimator import EstimatorConfig, OdometryEstimator, configure_baseline_cv_c
from .evaluation import kitti_errors, per_axis_drift
from .measurement import RadarScan, SensorModel
from .prior import State
from .se3 import Pose
from .simulator import scenario_presets, simulate

__version__ = "0.1.0"

__all__ = [
    "DataFormatError",
    "DivergenceError",
    "EstimatorConfig",
    "LogBranchError",
    "MagnusOdomError",
    "OdometryEstimator",
    "Pose",
    "RadarScan",
    "SensorModel",
    "SingularSystemError",
    "State",
    "TooShortError",
    "configure_baseline_cv_c",
    "kitti_errors",
    "per_axis_drift",
    "scenario_presets",
    "simulate",
]
