"""Trajectory metrics: segment drift, aligned absolute error, reporting."""

import json

import numpy as np
import pytest

from elastic_slam.errors import DegenerateInput, NoSegments
from elastic_slam.evaluation import (
    KITTI_SEGMENT_LENGTHS,
    absolute_trajectory_error,
    format_report,
    metric_report,
    path_length,
    relative_translation_error,
)
from elastic_slam.geometry import Pose


def naive_rte(est, gt, lengths=KITTI_SEGMENT_LENGTHS):
    """Plain-loop reference: walk the ground-truth path from every start,
    stop at the first pose past each segment length, compare relative
    translations in the start pose's frame."""
    pos_e = np.array([p.t for p in est])
    pos_g = np.array([p.t for p in gt])
    cum = [0.0]
    for a, b in zip(pos_g[:-1], pos_g[1:]):
        cum.append(cum[-1] + float(np.linalg.norm(b - a)))
    ratios = []
    for length in lengths:
        for i in range(len(gt)):
            j = i
            while j < len(gt) and cum[j] < cum[i] + length:
                j += 1
            if j >= len(gt):
                continue
            d_e = est[i].rotation.T @ (pos_e[j] - pos_e[i])
            d_g = gt[i].rotation.T @ (pos_g[j] - pos_g[i])
            ratios.append(np.linalg.norm(d_e - d_g) / length)
    if not ratios:
        raise NoSegments("path too short")
    return float(np.mean(ratios) * 100.0)


def kabsch_align_error(src, dst):
    """Independent alignment oracle: centroid + SVD, then mean residual."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    aligned = (src - cs) @ r.T + cd
    return float(np.mean(np.linalg.norm(aligned - dst, axis=1)))


def straight_path(n, step=1.0):
    return [Pose(np.array([1.0, 0, 0, 0]), np.array([i * step, 0.0, 0.0])) for i in range(n)]


def arc_path(n, step=1.0, curvature=0.002):
    """Gently curved planar path with a slow height ramp; never collinear."""
    poses = []
    heading = 0.0
    p = np.zeros(3)
    for i in range(n):
        poses.append(Pose.from_rotvec(np.array([0.0, 0.0, heading]), p.copy()))
        heading += curvature * step
        p = p + step * np.array([np.cos(heading), np.sin(heading), 0.001])
    return poses


def random_rigid(rng):
    v = rng.normal(size=3)
    return Pose.from_rotvec(v / np.linalg.norm(v) * rng.uniform(0.1, 2.9), rng.uniform(-50, 50, 3))


# -- path length -----------------------------------------------------------------


def test_path_length_of_unit_steps():
    assert path_length(straight_path(251)) == pytest.approx(250.0)
    assert path_length(straight_path(1)) == 0.0


# -- relative translation error ----------------------------------------------------


def test_rte_of_perfect_trajectory_is_exactly_zero():
    gt = arc_path(400)
    assert relative_translation_error(gt, gt) == 0.0


def test_rte_uniform_scale_error_on_long_straight_path():
    # 1% along-track scale on a 1 km straight line should read ~1%
    gt = straight_path(1001)
    est = [Pose(p.q, p.t * 1.01) for p in gt]
    rte = relative_translation_error(est, gt)
    assert abs(rte - 1.0) < 0.05


def test_rte_matches_naive_loop_oracle():
    rng = np.random.default_rng(50)
    gt = arc_path(480, step=0.5)
    est = [Pose(p.q, p.t + rng.normal(scale=0.05, size=3)) for p in gt]
    got = relative_translation_error(est, gt, segment_lengths=(100.0, 200.0))
    expected = naive_rte(est, gt, lengths=(100.0, 200.0))
    assert got == pytest.approx(expected, rel=1e-9)


def test_rte_too_short_path_raises():
    with pytest.raises(NoSegments):
        relative_translation_error(straight_path(51), straight_path(51))


def test_rte_invariant_under_shared_rigid_transform():
    rng = np.random.default_rng(51)
    gt = arc_path(300)
    est = [Pose(p.q, p.t + rng.normal(scale=0.1, size=3)) for p in gt]
    base = relative_translation_error(est, gt)
    world = random_rigid(rng)
    est_w = [world @ p for p in est]
    gt_w = [world @ p for p in gt]
    assert relative_translation_error(est_w, gt_w) == pytest.approx(base, abs=1e-9)


def test_rte_stride_on_uniform_error_is_exact():
    # uniform scale error makes every segment identical, so subsampled
    # starts must give the same mean
    gt = straight_path(1001)
    est = [Pose(p.q, p.t * 1.01) for p in gt]
    dense = relative_translation_error(est, gt)
    assert relative_translation_error(est, gt, stride=7) == pytest.approx(dense, abs=1e-12)


def test_rte_unequal_lengths_rejected():
    with pytest.raises(ValueError):
        relative_translation_error(straight_path(10), straight_path(11))


# -- absolute trajectory error ------------------------------------------------------


def test_ate_identical_is_zero():
    gt = arc_path(200)
    assert absolute_trajectory_error(gt, gt) == pytest.approx(0.0, abs=1e-12)


def test_ate_removes_rigid_offset():
    rng = np.random.default_rng(52)
    gt = arc_path(200)
    world = random_rigid(rng)
    est = [world @ p for p in gt]
    assert absolute_trajectory_error(est, gt) < 1e-7


def test_ate_offset_ramp_matches_hand_oracle():
    # perpendicular offset growing 0 -> 2 m along the run
    gt = arc_path(200)
    n = len(gt)
    est = [
        Pose(p.q, p.t + np.array([0.0, 2.0 * i / (n - 1), 0.0]))
        for i, p in enumerate(gt)
    ]
    got = absolute_trajectory_error(est, gt)
    expected = kabsch_align_error([p.t for p in est], [p.t for p in gt])
    assert got == pytest.approx(expected, abs=1e-9)
    assert got > 0.1  # the ramp is not rigid, so alignment cannot erase it


def test_ate_invariant_under_rigid_transform_of_estimate():
    rng = np.random.default_rng(53)
    gt = arc_path(150)
    est = [Pose(p.q, p.t + rng.normal(scale=0.2, size=3)) for p in gt]
    base = absolute_trajectory_error(est, gt)
    for _ in range(5):
        world = random_rigid(rng)
        moved = [world @ p for p in est]
        assert absolute_trajectory_error(moved, gt) == pytest.approx(base, abs=1e-7)


def test_ate_collinear_input_propagates_degenerate_error():
    gt = straight_path(100)
    with pytest.raises(DegenerateInput):
        absolute_trajectory_error(gt, gt)


def test_ate_unequal_lengths_rejected():
    with pytest.raises(ValueError):
        absolute_trajectory_error(straight_path(10), straight_path(9))


# -- report ------------------------------------------------------------------------


def test_metric_report_on_curved_path():
    gt = arc_path(300)
    report = metric_report(gt, gt)
    assert report["n_poses"] == 300
    assert report["rte_percent"] == 0.0
    assert report["ate_m"] == 0.0
    assert report["path_length_m"] == pytest.approx(path_length(gt), abs=1e-3)


def test_metric_report_flags_degenerate_and_short_cases():
    short = straight_path(40)
    report = metric_report(short, short)
    assert report["rte_percent"] is None and "rte_note" in report
    assert report["ate_m"] is None and "ate_note" in report


def test_format_report_ends_with_parseable_json():
    gt = arc_path(300)
    text = format_report(metric_report(gt, gt))
    parsed = json.loads(text.splitlines()[-1])
    assert parsed["n_poses"] == 300
    assert "rte_percent" in text and "ate_m" in text
