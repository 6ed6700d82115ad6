"""Trajectory metrics.

relative_translation_error follows the KITTI odometry devkit: for every
start pose and every segment length in 100..800 m (measured along the ground
truth path), compare the relative motion of estimate and ground truth and
average translation error / segment length, in percent.

absolute_trajectory_error rigidly aligns estimated positions to ground truth
first (translation-only association, one global SE(3) fit) and reports the
mean position error.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .errors import DegenerateInput, NoSegments
from .geometry import Pose, fit_rigid_transform

KITTI_SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


def _positions(poses: Sequence[Pose]) -> np.ndarray:
    return np.asarray([p.t for p in poses], dtype=float)


def _rotations(poses: Sequence[Pose]) -> np.ndarray:
    return np.asarray([p.rotation for p in poses], dtype=float)


def path_length(ground_truth: Sequence[Pose]) -> float:
    pos = _positions(ground_truth)
    if pos.shape[0] < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))


def relative_translation_error(
    estimate: Sequence[Pose],
    ground_truth: Sequence[Pose],
    segment_lengths: Sequence[float] = KITTI_SEGMENT_LENGTHS,
    stride: int = 1,
) -> float:
    """Mean segment drift in percent of segment length.

    Raises NoSegments when the ground-truth path is too short to fit the
    smallest segment.
    """
    if len(estimate) != len(ground_truth):
        raise ValueError("trajectories must have equal length")
    n = len(estimate)
    if n < 2:
        raise NoSegments("need at least 2 poses")
    t_est = _positions(estimate)
    t_gt = _positions(ground_truth)
    r_est = _rotations(estimate)
    r_gt = _rotations(ground_truth)
    cum = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(t_gt, axis=0), axis=1))]
    )

    errors = []
    starts = np.arange(0, n, stride)
    for length in segment_lengths:
        ends = np.searchsorted(cum, cum[starts] + length)
        ok = ends < n
        i = starts[ok]
        j = ends[ok]
        if i.size == 0:
            continue
        rel_est = np.einsum("nji,nj->ni", r_est[i], t_est[j] - t_est[i])
        rel_gt = np.einsum("nji,nj->ni", r_gt[i], t_gt[j] - t_gt[i])
        err = np.linalg.norm(rel_est - rel_gt, axis=1)
        errors.append(err / length)
    if not errors:
        raise NoSegments(
            f"ground-truth path is {cum[-1]:.1f} m, shorter than the "
            f"smallest segment ({min(segment_lengths):.0f} m)"
        )
    return float(np.mean(np.concatenate(errors)) * 100.0)


def absolute_trajectory_error(
    estimate: Sequence[Pose], ground_truth: Sequence[Pose]
) -> float:
    """Mean position error in meters after a best rigid alignment."""
    if len(estimate) != len(ground_truth):
        raise ValueError("trajectories must have equal length")
    src = _positions(estimate)
    dst = _positions(ground_truth)
    align = fit_rigid_transform(src, dst)
    aligned = src @ align.rotation.T + align.t
    return float(np.mean(np.linalg.norm(aligned - dst, axis=1)))


def metric_report(estimate: Sequence[Pose], ground_truth: Sequence[Pose]) -> dict:
    """RTE + ATE + bookkeeping in one machine-readable dict."""
    report: dict = {
        "n_poses": len(estimate),
        "path_length_m": round(path_length(ground_truth), 3),
    }
    try:
        report["rte_percent"] = round(
            relative_translation_error(estimate, ground_truth), 5
        )
    except NoSegments as exc:
        report["rte_percent"] = None
        report["rte_note"] = str(exc)
    try:
        report["ate_m"] = round(absolute_trajectory_error(estimate, ground_truth), 5)
    except DegenerateInput as exc:
        # a perfectly straight trajectory has no unique rigid alignment
        report["ate_m"] = None
        report["ate_note"] = str(exc)
    return report


def format_report(report: dict) -> str:
    """Human table plus the JSON line tools can parse."""
    lines = ["metric            value", "-" * 28]
    for key in ("n_poses", "path_length_m", "rte_percent", "ate_m"):
        if key in report:
            lines.append(f"{key:<17} {report[key]}")
    for key in ("rte_note", "ate_note"):
        if key in report:
            lines.append(f"note: {report[key]}")
    lines.append(json.dumps(report))
    return "\n".join(lines)
