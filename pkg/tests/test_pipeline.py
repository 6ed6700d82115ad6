"""Odometry loop: prediction, robust checks, insertion gate, full runs."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from elastic_slam import geometry as geo
from elastic_slam.geometry import Pose, TrajectoryFrame
from elastic_slam.pipeline import (
    PipelineConfig,
    make_state,
    predict_initial_frame,
    register_scan,
    run_odometry,
)
from elastic_slam.scan import Scan
from elastic_slam.simulator import (
    Box,
    SensorSpec,
    TrajectoryBuilder,
    World,
    simulate_scan,
)

FAST_SENSOR = SensorSpec(beams=24, azimuth_step_deg=0.75, noise_sigma=0.0)


def box_world(half=4.0):
    return World([Box(np.array([-half, -half, -1.5]), np.array([half, half, 2.5]))])


def scans_from(world, traj, n, sensor=FAST_SENSOR):
    return [
        simulate_scan(world, traj, 0.1 * i, 0.1 * (i + 1), sensor, index=i)[0]
        for i in range(n)
    ]


def fast_config(**overrides):
    return PipelineConfig.driving(keypoint_cell=0.5, **overrides)


def as_matrix(pose):
    m = np.eye(4)
    m[:3, :3] = Rotation.from_quat(np.roll(pose.q, -1)).as_matrix()
    m[:3, 3] = pose.t
    return m


def random_frame(rng):
    def pose():
        q = rng.normal(size=4)
        return Pose(q / np.linalg.norm(q), rng.uniform(-3, 3, 3))

    return TrajectoryFrame(pose(), pose(), 0, 0.0, 0.1)


# -- prediction ---------------------------------------------------------------


def test_prediction_first_scan_is_identity():
    pred = predict_initial_frame([])
    assert np.allclose(pred.begin.t, 0.0) and np.allclose(pred.end.t, 0.0)
    assert np.allclose(pred.begin.q, [1, 0, 0, 0]) and np.allclose(pred.end.q, [1, 0, 0, 0])


def test_prediction_second_scan_holds_position():
    rng = np.random.default_rng(80)
    f0 = random_frame(rng)
    pred = predict_initial_frame([f0])
    assert np.allclose(pred.begin.t, f0.end.t)
    assert np.allclose(pred.end.t, f0.end.t)
    assert np.allclose(pred.begin.q, f0.end.q)


def test_prediction_constant_velocity_advances():
    def frame_at(x0, x1):
        return TrajectoryFrame(
            Pose(np.array([1.0, 0, 0, 0]), np.array([x0, 0.0, 0.0])),
            Pose(np.array([1.0, 0, 0, 0]), np.array([x1, 0.0, 0.0])),
            0,
        )

    pred = predict_initial_frame([frame_at(0.0, 1.0), frame_at(1.0, 2.0)])
    assert np.allclose(pred.begin.t, [2.0, 0.0, 0.0])
    assert np.allclose(pred.end.t, [3.0, 0.0, 0.0])


def test_prediction_matches_matrix_oracle():
    rng = np.random.default_rng(81)
    for _ in range(50):
        f_a, f_b = random_frame(rng), random_frame(rng)
        pred = predict_initial_frame([f_a, f_b])
        m_a = as_matrix(f_a.end)
        m_b = as_matrix(f_b.end)
        expected_end = m_b @ np.linalg.inv(m_a) @ m_b
        assert np.allclose(as_matrix(pred.begin), m_b, atol=1e-9)
        assert np.allclose(as_matrix(pred.end), expected_end, atol=1e-9)


# -- register_scan -------------------------------------------------------------


def test_static_sensor_stays_at_identity():
    world = box_world()
    traj = TrajectoryBuilder().segment(2.0).build()
    state = run_odometry(scans_from(world, traj, 8), fast_config())
    assert len(state.frames) == 8
    # noise floor: neighborhoods straddling box edges bend the normals, so a
    # centimeter-level bias survives even with a noiseless sensor
    for frame in state.frames:
        assert np.linalg.norm(frame.end.t) < 0.02
        assert np.rad2deg(frame.end.rotation_angle_to(Pose.identity())) < 0.3
    for report in state.reports:
        assert not report.failed and not report.retried
        assert report.inserted
        assert report.rotation_change_deg < 5.0
    assert state.n_failures == 0


def test_yaw_jump_scan_is_solved_but_not_inserted():
    world = box_world()
    traj = (
        TrajectoryBuilder()
        .segment(0.3)
        .segment(0.1, omega=[0.0, 0.0, np.deg2rad(100.0)])  # 10 deg inside scan 3
        .segment(0.4)
        .build()
    )
    state = make_state(fast_config())
    for scan in scans_from(world, traj, 6):
        register_scan(state, scan)

    jump = state.reports[3]
    assert jump.solved and not jump.failed
    assert jump.rotation_change_deg >= 5.0
    assert not jump.inserted
    assert jump.map_voxels == state.reports[2].map_voxels  # map untouched

    after = state.reports[4]
    assert after.inserted and not after.failed
    assert np.rad2deg(state.frames[3].end.rotation_angle_to(traj.pose_at(0.4))) < 1.0
    assert state.n_failures == 0


def test_pure_noise_scan_fails_and_falls_back_to_prediction():
    world = box_world()
    traj = TrajectoryBuilder().segment(1.0).build()
    good = scans_from(world, traj, 3)
    rng = np.random.default_rng(82)
    dirs = rng.normal(size=(4000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    noise = Scan(
        positions=dirs * rng.uniform(20.0, 60.0, size=(4000, 1)),  # far from the box
        alphas=np.linspace(0.0, 1.0, 4000),
        index=2,
        tau_begin=0.2,
        tau_end=0.3,
    )
    state = make_state(fast_config())
    register_scan(state, good[0])
    register_scan(state, good[1])
    pred = predict_initial_frame(state.frames)
    frame, report = register_scan(state, noise)
    assert report.retried and report.failed
    assert not report.inserted
    assert np.allclose(frame.end.t, pred.end.t)
    assert np.array_equal(frame.end.q, pred.end.q)
    # the run recovers on the next good scan
    frame4, report4 = register_scan(state, good[2])
    assert report4.solved and not report4.failed


def test_scan_emptied_by_range_gate_is_flagged_not_fatal():
    world = box_world()
    traj = TrajectoryBuilder().segment(1.0).build()
    good = scans_from(world, traj, 3)
    too_far = Scan(positions=np.full((100, 3), 200.0), index=2, tau_begin=0.2, tau_end=0.3)
    state = make_state(fast_config())
    register_scan(state, good[0])
    register_scan(state, good[1])
    _, report = register_scan(state, too_far)
    assert report.failed and not report.solved
    assert report.n_keypoints == 0
    _, report4 = register_scan(state, good[2])
    assert report4.solved and not report4.failed


def test_map_grows_only_after_solve():
    world = box_world()
    traj = TrajectoryBuilder().segment(1.0).build()
    state = make_state(fast_config())
    scans = scans_from(world, traj, 3)
    register_scan(state, scans[0])
    voxels_after_first = len(state.map)
    assert voxels_after_first > 0
    _, rep = register_scan(state, scans[1])
    assert rep.map_voxels >= voxels_after_first


# -- run_odometry ----------------------------------------------------------------


def test_single_scan_run_yields_identity():
    world = box_world()
    traj = TrajectoryBuilder().segment(0.5).build()
    state = run_odometry(scans_from(world, traj, 1), fast_config())
    assert len(state.frames) == 1
    assert np.allclose(state.frames[0].begin.t, 0.0)
    assert np.allclose(state.frames[0].end.t, 0.0)


def test_empty_scan_source_is_an_error():
    with pytest.raises(ValueError):
        run_odometry(iter([]), fast_config())


def test_runs_are_deterministic():
    world = box_world()
    traj = (
        TrajectoryBuilder()
        .set_velocity([0.8, 0.0, 0.0])
        .segment(1.0, omega=[0.0, 0.0, 0.05])
        .build()
    )

    def run():
        return run_odometry(scans_from(world, traj, 6), fast_config())

    a, b = run(), run()
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.begin.q, fb.begin.q)
        assert np.array_equal(fa.begin.t, fb.begin.t)
        assert np.array_equal(fa.end.q, fb.end.q)
        assert np.array_equal(fa.end.t, fb.end.t)


def test_mid_poses_and_timings_shape():
    world = box_world()
    traj = TrajectoryBuilder().segment(1.0).build()
    state = run_odometry(scans_from(world, traj, 4), fast_config())
    mids = state.mid_poses()
    assert len(mids) == 4
    expected = geo.interpolate_pose(state.frames[2], 0.5)
    assert np.allclose(mids[2].t, expected.t)
    assert np.allclose(mids[2].q, expected.q)
    ms = state.timings_ms()
    assert ms.shape == (4,)
    assert np.all(ms > 0)


def test_profile_configs_follow_contract():
    driving = PipelineConfig.driving()
    high = PipelineConfig.high_frequency()
    assert driving.voxel_size == 1.0
    assert high.voxel_size == 0.8
    assert driving.keypoint_cell == 1.5
    assert high.keypoint_cell == 0.5
    assert driving.eviction_radius == 150.0
    assert high.eviction_radius == 60.0
    assert PipelineConfig.for_profile("high-frequency").voxel_size == 0.8
    with pytest.raises(ValueError):
        PipelineConfig.for_profile("race_car")
