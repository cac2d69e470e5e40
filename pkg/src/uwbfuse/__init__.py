"""UWB anchor self-calibration from SLAM trajectories, plus loosely-coupled
range-SLAM fusion into a persistent anchor-referenced frame."""

from .apc import ApcConfig, CalibrationResult, calibrate, filter_outliers, init_anchor_guess
from .dataio import AteReport, RunBundle, ate, load_bundle, load_run
from .errors import UwbFuseError
from .factors import (
    AnchorHeightPrior,
    AnchorPairPrior,
    LinkBias,
    RangeMeasurement,
    TagExtrinsics,
)
from .geometry import Pose, Rotation, Trajectory, interpolate_pose, slerp, so3_log_vee
from .lcrsf import FusionConfig, FusionOutput, initialize, predict_pose, run_fusion
from .simgen import ScenarioConfig, ScenarioTruth, generate, label_report, write_run
from .solver import Problem, SolveOptions, SolveReport, cauchy_cost, check_jacobians, solve

__version__ = "0.1.0"

__all__ = [
    "ApcConfig",
    "CalibrationResult",
    "calibrate",
    "filter_outliers",
    "init_anchor_guess",
    "AteReport",
    "RunBundle",
    "ate",
    "load_bundle",
    "load_run",
    "UwbFuseError",
    "AnchorHeightPrior",
    "AnchorPairPrior",
    "LinkBias",
    "RangeMeasurement",
    "TagExtrinsics",
    "Pose",
    "Rotation",
    "Trajectory",
    "interpolate_pose",
    "slerp",
    "so3_log_vee",
    "FusionConfig",
    "FusionOutput",
    "initialize",
    "predict_pose",
    "run_fusion",
    "ScenarioConfig",
    "ScenarioTruth",
    "generate",
    "label_report",
    "write_run",
    "Problem",
    "SolveOptions",
    "SolveReport",
    "cauchy_cost",
    "check_jacobians",
    "solve",
    "__version__",
]
