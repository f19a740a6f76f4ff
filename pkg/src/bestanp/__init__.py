"""Closed-form pose estimation for 2D forward-looking sonar from 3D-point correspondences."""

__version__ = "0.1.0"

from .estimator import CorrespondenceSet, EstimateReport, EstimationError, bestanp, compute_crlb
from .geometry import Pose
from .sonar import FovSpec, NoiseMechanism, NoiseModel, SonarMeasurement

__all__ = [
    "CorrespondenceSet",
    "EstimateReport",
    "EstimationError",
    "FovSpec",
    "NoiseMechanism",
    "NoiseModel",
    "Pose",
    "SonarMeasurement",
    "bestanp",
    "compute_crlb",
]
