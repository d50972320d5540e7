"""Hierarchical relative pose estimation for robot swarms.

The package estimates the relative positions and orientations of a team of
robots with respect to one reference robot, from inter-robot distances,
camera bearings, gravity directions and IMU streams. Estimators are layered:

* closed-form single-frame solution (``single_frame.run_closed_form``)
* nonlinear single-frame refinement (``single_frame.refine``)
* loosely-coupled sliding-window optimization
* tightly-coupled sliding-window optimization with marginalization
  (both in ``multi_frame.MultiFrameEstimator``)

plus a bearing outlier rejector (``outliers``), a synthetic benchmark
simulator (``sim``), evaluation metrics (``metrics``), and an LED flicker
id codebook (``idcode``).
"""

from .core import (
    BearingMeasurement,
    DistanceMeasurement,
    Extrinsics,
    GravityMeasurement,
    ImuSample,
    MeasurementFrame,
    NoiseConfig,
    PoseEstimate,
    RobotState,
)

__all__ = [
    "BearingMeasurement",
    "DistanceMeasurement",
    "Extrinsics",
    "GravityMeasurement",
    "ImuSample",
    "MeasurementFrame",
    "NoiseConfig",
    "PoseEstimate",
    "RobotState",
]

__version__ = "0.1.0"
