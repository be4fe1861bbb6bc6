"""Trajectory alignment and error metrics over event logs.

Mirrors the evaluation methodology used for the guidance system: estimated
trajectories are aligned to ground truth with a 4-DOF fit over the first
seconds of overlap, then 2D/3D absolute trajectory errors are the RMSE of
the remaining point distances.  Scenario-level metrics add the mean
deviation of the flown path from the desired path and the split of the
relative-localization error into detection-visible and occluded segments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, TextIO

import numpy as np

from .alignment import closed_form_align
from .config import DEFAULTS, ScenarioConfig, coerce
from .geometry import Frame, RelativeTransform
from .simulator import EventLog, ReferencePath, generate_trajectory


class EvaluationError(ValueError):
    """Raised on unusable evaluation inputs (no overlap, empty series)."""


@dataclass(frozen=True)
class ErrorReport:
    """Metrics of one scenario run (or one trajectory pair)."""

    ate_2d: float
    ate_3d: float
    mean_path_deviation: float
    rel_loc_rmse: float
    tracked_rmse: Optional[float]
    untracked_rmse: Optional[float]
    failure: bool
    stamps: np.ndarray          # per-sample series (estimate stamps)
    errors_2d: np.ndarray
    errors_3d: np.ndarray
    visible: np.ndarray         # bool per sample


def _interp_series(t: np.ndarray, series_t: np.ndarray, series_v: np.ndarray) -> np.ndarray:
    return np.column_stack([
        np.interp(t, series_t, series_v[:, i]) for i in range(series_v.shape[1])
    ])


def align_first_window(
    traj: tuple[np.ndarray, np.ndarray],
    ground_truth: tuple[np.ndarray, np.ndarray],
    window: float = 20.0,
) -> RelativeTransform:
    """4-DOF least-squares fit of a trajectory onto ground truth.

    Only samples within the first ``window`` seconds of the common time span
    are used, so drift accumulated later does not influence the alignment.
    Both inputs are (stamps, (N, 3) positions) tuples; ground truth is
    interpolated to the trajectory stamps.
    """
    t_traj, p_traj = traj
    t_gt, p_gt = ground_truth
    if len(t_traj) == 0 or len(t_gt) == 0:
        raise EvaluationError("empty trajectory")
    start = max(t_traj[0], t_gt[0])
    end = min(t_traj[-1], t_gt[-1])
    if end <= start:
        raise EvaluationError("trajectories do not overlap in time")
    mask = (t_traj >= start) & (t_traj <= min(start + window, end))
    if int(mask.sum()) < 2:
        raise EvaluationError(
            f"insufficient overlap: {int(mask.sum())} samples in the first "
            f"{window} s window"
        )
    gt_at = _interp_series(t_traj[mask], t_gt, p_gt)
    t, theta = closed_form_align(p_traj[mask], gt_at)
    return RelativeTransform(t, theta, Frame.LIDAR, Frame.LIDAR,
                             stamp=float(start))


def absolute_trajectory_error(
    aligned: tuple[np.ndarray, np.ndarray],
    ground_truth: tuple[np.ndarray, np.ndarray],
) -> tuple[float, float]:
    """(2D, 3D) RMSE between an aligned trajectory and interpolated truth."""
    t_traj, p_traj = aligned
    t_gt, p_gt = ground_truth
    start = max(t_traj[0], t_gt[0]) if len(t_traj) and len(t_gt) else 0.0
    end = min(t_traj[-1], t_gt[-1]) if len(t_traj) and len(t_gt) else -1.0
    mask = (t_traj >= start) & (t_traj <= end)
    if not len(t_traj) or not len(t_gt) or not mask.any():
        raise EvaluationError("empty overlap between trajectory and ground truth")
    gt_at = _interp_series(t_traj[mask], t_gt, p_gt)
    delta = p_traj[mask] - gt_at
    ate_2d = float(np.sqrt(np.mean(delta[:, 0] ** 2 + delta[:, 1] ** 2)))
    ate_3d = float(np.sqrt(np.mean(np.einsum("ij,ij->i", delta, delta))))
    return ate_2d, ate_3d


def mean_path_deviation(actual: np.ndarray, reference: ReferencePath) -> float:
    """Mean point-to-path distance of (N, 3) positions from the desired path."""
    if len(actual) == 0:
        return 0.0
    return float(np.mean([reference.distance(p) for p in actual]))


def _visibility_flags(est_stamps: np.ndarray, det_stamps: np.ndarray,
                      staleness: float) -> np.ndarray:
    """A sample counts as tracked when a secondary detection is at most
    ``staleness`` seconds older (same rule the guider uses for its status)."""
    if len(det_stamps) == 0:
        return np.zeros(len(est_stamps), dtype=bool)
    idx = np.searchsorted(det_stamps, est_stamps, side="right") - 1
    has_prev = idx >= 0
    age = np.where(has_prev, est_stamps - det_stamps[np.clip(idx, 0, None)], np.inf)
    return age <= staleness


def split_tracked_rmse(log: EventLog, staleness: float = 1.0
                       ) -> tuple[Optional[float], Optional[float]]:
    """Relative-localization RMSE split into visible / occluded samples."""
    est_t, est_p, _, _ = log.estimates()
    ts_t, ts_p, _ = log.truth("TS")
    if len(est_t) == 0 or len(ts_t) == 0:
        return None, None
    truth_at = _interp_series(est_t, ts_t, ts_p)
    err = np.linalg.norm(est_p - truth_at, axis=1)
    visible = _visibility_flags(est_t, log.detection_stamps(0), staleness)
    tracked = float(np.sqrt(np.mean(err[visible] ** 2))) if visible.any() else None
    untracked = float(np.sqrt(np.mean(err[~visible] ** 2))) if (~visible).any() else None
    return tracked, untracked


def log_config(log: EventLog) -> ScenarioConfig:
    """Rebuild the effective scenario config from a log's header echo."""
    values = dict(DEFAULTS)
    for key, text in log.config_echo().items():
        values[key] = coerce(key, text)
    return ScenarioConfig(values)


def evaluate_log(log: EventLog) -> ErrorReport:
    """Full metric set for one scenario event log."""
    config = log_config(log)
    est_t, est_p, _, _ = log.estimates()
    ts_t, ts_p, _ = log.truth("TS")
    if len(ts_t) == 0:
        raise EvaluationError("log contains no ground-truth records")
    if len(est_t) == 0:
        raise EvaluationError("log contains no estimate records "
                              "(the guider never initialized)")

    truth_at = _interp_series(est_t, ts_t, ts_p)
    delta = est_p - truth_at
    errors_2d = np.hypot(delta[:, 0], delta[:, 1])
    errors_3d = np.linalg.norm(delta, axis=1)
    rel_loc_rmse = float(np.sqrt(np.mean(errors_3d ** 2)))

    transform = align_first_window((est_t, est_p), (ts_t, ts_p), window=20.0)
    aligned = est_p @ transform.rotation.T + transform.translation
    ate_2d, ate_3d = absolute_trajectory_error((est_t, aligned), (ts_t, ts_p))

    desired = generate_trajectory(config.values)
    path = ReferencePath(config.values, desired)
    start = desired.points[0].stamp
    mask = ts_t >= start
    deviation = mean_path_deviation(ts_p[mask], path)

    staleness = config.values["guider.detection_staleness"]
    visible = _visibility_flags(est_t, log.detection_stamps(0), staleness)
    tracked = float(np.sqrt(np.mean(errors_3d[visible] ** 2))) if visible.any() else None
    untracked = float(np.sqrt(np.mean(errors_3d[~visible] ** 2))) if (~visible).any() else None

    return ErrorReport(
        ate_2d=ate_2d,
        ate_3d=ate_3d,
        mean_path_deviation=deviation,
        rel_loc_rmse=rel_loc_rmse,
        tracked_rmse=tracked,
        untracked_rmse=untracked,
        failure=log.failed,
        stamps=est_t,
        errors_2d=errors_2d,
        errors_3d=errors_3d,
        visible=visible,
    )


def format_report(report: ErrorReport, config: Optional[ScenarioConfig] = None) -> str:
    """key=value text form of a report (deterministic float formatting)."""
    lines = [
        f"ate_2d = {report.ate_2d!r}",
        f"ate_3d = {report.ate_3d!r}",
        f"mean_path_deviation = {report.mean_path_deviation!r}",
        f"rel_loc_rmse = {report.rel_loc_rmse!r}",
    ]
    if report.tracked_rmse is not None:
        lines.append(f"tracked_rmse = {report.tracked_rmse!r}")
    if report.untracked_rmse is not None:
        lines.append(f"untracked_rmse = {report.untracked_rmse!r}")
    lines.append(f"failure = {'true' if report.failure else 'false'}")
    lines.append(f"n_samples = {len(report.stamps)}")
    if config is not None:
        from .config import format_value
        for key, value in config.effective_items():
            lines.append(f"config.{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def write_per_sample_csv(report: ErrorReport, fh: TextIO) -> None:
    """CSV per-sample error series: t, error_2d, error_3d, visible_flag."""
    fh.write("t,error_2d,error_3d,visible_flag\n")
    for t, e2, e3, vis in zip(report.stamps, report.errors_2d,
                              report.errors_3d, report.visible):
        fh.write(f"{float(t)!r},{float(e2)!r},{float(e3)!r},{1 if vis else 0}\n")
