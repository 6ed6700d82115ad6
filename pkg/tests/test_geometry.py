"""Pose algebra, slerp, interpolation, and rigid alignment."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation, Slerp

from elastic_slam import geometry as geo
from elastic_slam.errors import DegenerateInput
from elastic_slam.geometry import Pose, TrajectoryFrame


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_pose(rng, t_scale=5.0):
    return Pose(random_quat(rng), rng.uniform(-t_scale, t_scale, 3))


def rot_quat(axis, deg):
    return geo.quat_from_rotvec(np.deg2rad(deg) * np.asarray(axis, dtype=float))


def quat_angle_between(a, b):
    return geo.quat_angle(geo.quat_multiply(geo.quat_conjugate(a), b))


# -- quaternions ---------------------------------------------------------------


def test_quat_normalized_after_constructors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = Pose(rng.normal(size=4) * 3.0, rng.normal(size=3))
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9


def test_quat_matrix_round_trip_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(200):
        q = random_quat(rng)
        m = geo.quat_to_matrix(q)
        # scipy uses (x, y, z, w) ordering
        m_ref = Rotation.from_quat(np.roll(q, -1)).as_matrix()
        assert np.allclose(m, m_ref, atol=1e-12)
        q2 = geo.quat_from_matrix(m)
        assert min(np.linalg.norm(q2 - q), np.linalg.norm(q2 + q)) < 1e-9


def test_rotvec_round_trip():
    # canonical round trip holds for |v| < pi (larger angles wrap)
    rng = np.random.default_rng(2)
    for _ in range(200):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        v = direction * rng.uniform(0, np.pi - 1e-3)
        q = geo.quat_from_rotvec(v)
        assert np.allclose(geo.quat_to_rotvec(q), v, atol=1e-9)


# -- slerp ---------------------------------------------------------------------


def test_slerp_identity_case():
    rng = np.random.default_rng(3)
    q = random_quat(rng)
    assert np.allclose(geo.slerp(q, q, 0.5), q, atol=1e-12)


def test_slerp_halfway_z90():
    got = geo.slerp(rot_quat([0, 0, 1], 0.0), rot_quat([0, 0, 1], 90.0), 0.5)
    want = rot_quat([0, 0, 1], 45.0)
    assert quat_angle_between(got, want) < 1e-9


def test_slerp_coaxial_quarter():
    # coaxial rotations interpolate linearly in angle: 10 + 0.25 * 160 = 50
    got = geo.slerp(rot_quat([1, 0, 0], 10.0), rot_quat([1, 0, 0], 170.0), 0.25)
    want = rot_quat([1, 0, 0], 50.0)
    assert quat_angle_between(got, want) < 1e-9


def test_slerp_unit_norm_and_boundaries():
    rng = np.random.default_rng(4)
    for _ in range(500):
        qa, qb = random_quat(rng), random_quat(rng)
        a = rng.uniform()
        q = geo.slerp(qa, qb, a)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12
        assert quat_angle_between(geo.slerp(qa, qb, 0.0), qa) < 1e-9
        assert quat_angle_between(geo.slerp(qa, qb, 1.0), qb) < 1e-9


def test_slerp_takes_shorter_arc():
    rng = np.random.default_rng(5)
    for _ in range(200):
        qa, qb = random_quat(rng), random_quat(rng)
        total = quat_angle_between(qa, qb)
        mid = geo.slerp(qa, qb, 0.5)
        # on the shorter arc the midpoint bisects the relative rotation
        assert abs(quat_angle_between(qa, mid) - total / 2.0) < 1e-9
        # negating one endpoint must not change the resulting rotation
        mid2 = geo.slerp(-qa, qb, 0.5)
        assert quat_angle_between(mid, mid2) < 1e-9


def test_slerp_matches_scipy():
    rng = np.random.default_rng(6)
    for _ in range(100):
        qa, qb = random_quat(rng), random_quat(rng)
        alphas = rng.uniform(size=5)
        sl = Slerp([0.0, 1.0], Rotation.from_quat(np.roll([qa, qb], -1, axis=1)))
        for a in alphas:
            got = geo.quat_to_matrix(geo.slerp(qa, qb, a))
            want = sl(a).as_matrix()
            assert np.allclose(got, want, atol=1e-9)


# -- pose composition and interpolation ------------------------------------------


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(7)
    for _ in range(100):
        p = random_pose(rng)
        ident = p @ p.inverse()
        assert geo.quat_angle(ident.q) < 1e-9
        assert np.linalg.norm(ident.t) < 1e-9


def test_compose_associative():
    rng = np.random.default_rng(8)
    for _ in range(100):
        a, b, c = (random_pose(rng) for _ in range(3))
        left = (a @ b) @ c
        right = a @ (b @ c)
        assert left.rotation_angle_to(right) < 1e-9
        assert np.linalg.norm(left.t - right.t) < 1e-9


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        got = (a @ b).matrix
        want = a.matrix @ b.matrix
        assert np.allclose(got, want, atol=1e-9)


def test_transform_point_examples():
    p = np.array([1.0, 2.0, 3.0])
    assert np.allclose(geo.transform_point(Pose.identity(), p), p)
    rz = Pose(rot_quat([0, 0, 1], 90.0), np.zeros(3))
    assert np.allclose(geo.transform_point(rz, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)
    rng = np.random.default_rng(10)
    pose = random_pose(rng)
    r = rng.normal(size=3)
    q = geo.transform_point(pose.inverse(), r)
    assert np.allclose(geo.transform_point(pose, q), r, atol=1e-9)


def test_interpolate_pose_boundaries_and_lerp():
    rng = np.random.default_rng(11)
    frame = TrajectoryFrame(random_pose(rng), random_pose(rng), 0)
    assert geo.interpolate_pose(frame, 0.0).rotation_angle_to(frame.begin) < 1e-12
    assert geo.interpolate_pose(frame, 1.0).rotation_angle_to(frame.end) < 1e-12
    assert np.allclose(geo.interpolate_pose(frame, 0.0).t, frame.begin.t)
    assert np.allclose(geo.interpolate_pose(frame, 1.0).t, frame.end.t)

    frame = TrajectoryFrame(
        Pose(t=np.zeros(3)), Pose(t=np.array([2.0, 0.0, 0.0])), 0
    )
    assert np.allclose(geo.interpolate_pose(frame, 0.25).t, [0.5, 0.0, 0.0])


def test_interpolate_pose_continuous_in_alpha():
    rng = np.random.default_rng(12)
    for _ in range(20):
        frame = TrajectoryFrame(random_pose(rng), random_pose(rng), 0)
        a = rng.uniform(0.0, 1.0 - 1e-6)
        p0 = geo.interpolate_pose(frame, a)
        p1 = geo.interpolate_pose(frame, a + 1e-6)
        assert p0.rotation_angle_to(p1) < 1e-4
        assert np.linalg.norm(p0.t - p1.t) < 1e-4


def test_interpolate_many_matches_scalar():
    rng = np.random.default_rng(13)
    frame = TrajectoryFrame(random_pose(rng), random_pose(rng), 0)
    alphas = rng.uniform(size=50)
    rots, ts = geo.interpolate_many(frame, alphas)
    for i, a in enumerate(alphas):
        p = geo.interpolate_pose(frame, a)
        assert np.allclose(rots[i], p.rotation, atol=1e-12)
        assert np.allclose(ts[i], p.t, atol=1e-12)


# -- rigid alignment -------------------------------------------------------------


def test_fit_rigid_identity_on_equal_sets():
    rng = np.random.default_rng(14)
    pts = rng.normal(size=(40, 3))
    pose = geo.fit_rigid_transform(pts, pts)
    assert geo.quat_angle(pose.q) < 1e-9
    assert np.linalg.norm(pose.t) < 1e-9


def test_fit_rigid_recovers_known_transform():
    rng = np.random.default_rng(15)
    for _ in range(50):
        true = random_pose(rng)
        src = rng.normal(size=(30, 3)) * 4.0
        dst = src @ true.rotation.T + true.t
        got = geo.fit_rigid_transform(src, dst)
        assert got.rotation_angle_to(true) < 1e-7
        assert np.linalg.norm(got.t - true.t) < 1e-7
        residual = dst - (src @ got.rotation.T + got.t)
        assert np.abs(residual).max() < 1e-7


def test_fit_rigid_rejects_degenerate():
    with pytest.raises(DegenerateInput):
        geo.fit_rigid_transform(np.zeros((2, 3)), np.zeros((2, 3)))
    # collinear points leave a rotation about the line unconstrained
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateInput):
        geo.fit_rigid_transform(line, line + 1.0)


def test_fit_rigid_proper_rotation_on_reflection_bait():
    # near-planar target constructed to tempt an improper (det = -1) solution
    rng = np.random.default_rng(16)
    src = rng.normal(size=(20, 3))
    src[:, 2] *= 1e-3
    dst = src.copy()
    dst[:, 1] *= -1.0
    pose = geo.fit_rigid_transform(src, dst)
    assert np.linalg.det(pose.rotation) > 0.0


# -- so3 helpers used by the solver ---------------------------------------------


def test_so3_exp_matches_scipy():
    rng = np.random.default_rng(17)
    for _ in range(100):
        v = rng.normal(size=3) * rng.uniform(0, 3)
        assert np.allclose(geo.so3_exp(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-10)


def test_so3_jacobian_inverse_pairs():
    rng = np.random.default_rng(18)
    for _ in range(100):
        v = rng.normal(size=3) * rng.uniform(0, 2.5)
        jr = geo.so3_right_jacobian(v)
        assert np.allclose(jr @ geo.so3_right_jacobian_inv(v), np.eye(3), atol=1e-8)
        # left Jacobian of v equals right Jacobian of -v
        jl_inv = geo.so3_left_jacobian_inv(v)
        assert np.allclose(jl_inv, geo.so3_right_jacobian_inv(-v), atol=1e-10)


def test_so3_right_jacobian_finite_difference():
    # Exp(v + J_r(v) @ dv) ~ Exp(v) Exp(dv) for small dv
    rng = np.random.default_rng(19)
    for _ in range(50):
        v = rng.normal(size=3) * rng.uniform(0.1, 2.0)
        dv = rng.normal(size=3) * 1e-6
        lhs = geo.so3_exp(v) @ geo.so3_exp(geo.so3_right_jacobian(v) @ dv)
        rhs = geo.so3_exp(v + dv)
        assert np.allclose(lhs, rhs, atol=1e-10)


def test_slerp_tangent_weights_finite_difference():
    """M_b, M_e map endpoint tangent perturbations to the interpolated
    rotation's tangent: Log(R(a)^T slerp(R_b Exp(db), R_e Exp(de), a))
    ~ M_b db + M_e de."""
    rng = np.random.default_rng(20)
    h = 1e-6
    for _ in range(50):
        qa, qb = random_quat(rng), random_quat(rng)
        ra, rb = geo.quat_to_matrix(qa), geo.quat_to_matrix(qb)
        phi = geo.quat_to_rotvec(
            geo.quat_from_matrix(ra.T @ rb)
        )
        a = rng.uniform()
        m_b, m_e = geo.slerp_tangent_weights(phi, np.array([a]))
        r_mid = geo.quat_to_matrix(geo.slerp(qa, qb, a))
        for k in range(3):
            db = np.zeros(3)
            db[k] = h
            qa_p = geo.quat_multiply(qa, geo.quat_from_rotvec(db))
            r_p = geo.quat_to_matrix(geo.slerp(qa_p, qb, a))
            col = geo.quat_to_rotvec(geo.quat_from_matrix(r_mid.T @ r_p)) / h
            assert np.allclose(m_b[0][:, k], col, atol=1e-5)
            qb_p = geo.quat_multiply(qb, geo.quat_from_rotvec(db))
            r_p = geo.quat_to_matrix(geo.slerp(qa, qb_p, a))
            col = geo.quat_to_rotvec(geo.quat_from_matrix(r_mid.T @ r_p)) / h
            assert np.allclose(m_e[0][:, k], col, atol=1e-5)
