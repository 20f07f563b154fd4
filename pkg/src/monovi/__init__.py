"""Visual-inertial initialization with monocular depth constraints."""
from .geometry import PinholeCamera, Pose, UnitQuaternion
from .imu import ImuData, NoiseModel, preintegrate
from .pipeline import InitReport, PipelineConfig, run_initialization
from .sim import Scenario, generate, generate_sequence, preset
from .state import Feature, InitWindow, KeyframeState, ScaleShift

__version__ = "0.1.0"

__all__ = [
    "Feature",
    "ImuData",
    "InitReport",
    "InitWindow",
    "KeyframeState",
    "NoiseModel",
    "PinholeCamera",
    "PipelineConfig",
    "Pose",
    "ScaleShift",
    "Scenario",
    "UnitQuaternion",
    "generate",
    "generate_sequence",
    "preintegrate",
    "preset",
    "run_initialization",
]
