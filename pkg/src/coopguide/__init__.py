"""Cooperative guidance of a VIO-localized agent by a lidar-localized agent.

Library layout:
    geometry    frames, 4-DOF transforms, heading arithmetic, interpolation
    alignment   sliding-window robust alignment of detection/VIO trajectories
    tracker     delay-tolerant constant-velocity Kalman tracking + gating
    guider      estimation pipeline + reference transformation/streaming
    config      scenario configuration (defaults, file format, overrides)
    simulator   deterministic closed-loop scenario engine + event logs
    evaluation  trajectory/scenario metrics over event logs
    cli         run / sweep / eval command-line entry points
"""

from .alignment import (
    AlignmentConfig,
    AlignmentResult,
    Correspondence,
    build_correspondences,
    closed_form_align,
    degeneracy_check,
    soft_l1,
    solve_alignment,
)
from .config import ConfigError, ScenarioConfig, build_config, load_config_file
from .evaluation import (
    ErrorReport,
    absolute_trajectory_error,
    align_first_window,
    evaluate_log,
    mean_path_deviation,
    split_tracked_rmse,
)
from .geometry import (
    Detection,
    Frame,
    RelativeTransform,
    TimedPose,
    apply_transform,
    interpolate,
    wrap_heading,
)
from .guider import Guider, GuiderConfig, GuiderOutput, GuiderStatus, Trajectory, TrajectoryPoint
from .simulator import EventLog, run_scenario
from .tracker import (
    GateDecision,
    HistoryBuffer,
    Measurement,
    MeasurementKind,
    TrackerConfig,
    TrackerState,
    associate,
    chi2_critical,
    estimate_at,
    insert_and_replay,
    make_heading_measurement,
    make_vio_measurement,
    predict,
    try_initialize,
    update,
)

__version__ = "0.1.0"
