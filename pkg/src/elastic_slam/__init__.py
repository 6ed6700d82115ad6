"""Elastic continuous-time LiDAR odometry and SLAM.

Scans are registered against a sparse voxel map with one pose per scan
boundary, interpolating per point, so motion distortion is solved jointly
with the alignment. A bird's-eye elevation-grid matcher and an SE(3) pose
graph close loops on top of the odometry.
"""

from .errors import (
    DegenerateGrid,
    DegenerateInput,
    DegenerateNeighborhood,
    ElasticSlamError,
    EmptyNeighborhood,
    EmptyScan,
    MalformedFile,
    NoSegments,
    RegistrationFailed,
    SolverFailure,
    TooFewResiduals,
)
from .geometry import (
    Pose,
    TrajectoryFrame,
    fit_rigid_transform,
    interpolate_many,
    interpolate_pose,
    slerp,
)
from .scan import Scan, ScanPoint, clip_by_range, grid_sample_keypoints
from .voxel_map import InsertionReport, NeighborhoodStats, VoxelMap
from .registration import (
    CONSTANT_VELOCITY_RIGID,
    ELASTIC,
    NONE,
    Residual,
    ResidualBatch,
    SolveReport,
    SolverConfig,
    build_residuals,
    linearize,
    objective,
    solve,
)
from .pipeline import (
    OdometryState,
    PipelineConfig,
    ScanReport,
    make_state,
    predict_initial_frame,
    register_scan,
    run_odometry,
)
from .evaluation import (
    absolute_trajectory_error,
    metric_report,
    relative_translation_error,
)
from .loop_closure import (
    ElevationGrid,
    GridParams,
    LoopConstraint,
    MatchParams,
    build_elevation_grid,
    detect_loops,
    grid_windows,
    match_grids,
)
from .pose_graph import Edge, PoseGraph, build_graph, optimize, repair_frames
from .simulator import (
    GroundTruthTrajectory,
    Scenario,
    SensorSpec,
    TrajectoryBuilder,
    World,
    make_scenario,
    simulate_scan,
)

__version__ = "0.1.0"

__all__ = [
    "Pose",
    "TrajectoryFrame",
    "Scan",
    "ScanPoint",
    "VoxelMap",
    "SolverConfig",
    "PipelineConfig",
    "run_odometry",
    "make_scenario",
    "solve",
    "__version__",
]
