"""SE(3) pose algebra: quaternions, slerp, pose interpolation, rigid alignment.

Quaternions are stored as (w, x, y, z) numpy arrays. Rotation perturbations
throughout the library are right-multiplicative tangent vectors:
R <- R @ exp(skew(delta)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput

_EPS = 1e-12


# ---------------------------------------------------------------------------
# quaternion primitives (w, x, y, z)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product; broadcasts over leading dimensions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (radians) -> unit quaternion.

    Broadcasts over leading dimensions. Uses a Taylor expansion of
    sin(t/2)/t below 1e-8 to stay exact at the identity.
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    return np.concatenate([w, scale * v], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithm map: unit quaternion -> rotation vector with angle <= pi."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)  # hemisphere with w >= 0
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    w = q[..., :1]
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 2.0 / np.clip(w, _EPS, None), angle / np.where(small, 1.0, s))
    return scale * q[..., 1:]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) -> rotation matrix/matrices, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w >= 0), Shepperd's method."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle (radians) of a unit quaternion, in [0, pi]."""
    q = np.asarray(q, dtype=float)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


def slerp(r_b: np.ndarray, r_e: np.ndarray, alpha) -> np.ndarray:
    """Geodesic interpolation between two unit quaternions.

    Takes the shorter arc (sign flip when the dot product is negative) and is
    exact at alpha 0 and 1. `alpha` may be a scalar or an array; the result
    broadcasts accordingly.
    """
    r_b = quat_normalize(r_b)
    r_e = quat_normalize(r_e)
    if float(np.dot(r_b, r_e)) < 0.0:
        r_e = -r_e
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 0:
        if alpha == 0.0:
            return r_b
        if alpha == 1.0:
            return r_e
    delta = quat_to_rotvec(quat_multiply(quat_conjugate(r_b), r_e))
    return quat_multiply(r_b, quat_from_rotvec(alpha[..., None] * delta))


# ---------------------------------------------------------------------------
# SO(3) tangent-space helpers (used by the solvers)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; broadcasts: (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=float)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _so3_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(1-cos)/t^2 and (t-sin)/t^3 with series fallbacks near zero."""
    t2 = theta * theta
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / (safe**3))
    return a, b


def so3_exp(v: np.ndarray) -> np.ndarray:
    """Rotation vector(s) -> rotation matrix/matrices via Rodrigues."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b = _so3_coeffs(theta)
    small = theta < 1e-5
    sinc = np.where(small, 1.0 - theta * theta / 6.0, np.sin(np.where(small, 1.0, theta)) / np.where(small, 1.0, theta))
    s = skew(v)
    s2 = s @ s
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye + sinc[..., None, None] * s + a[..., None, None] * s2


def so3_right_jacobian(v: np.ndarray) -> np.ndarray:
    """Right Jacobian of the SO(3) exponential; broadcasts over batches."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b = _so3_coeffs(theta)
    s = skew(v)
    s2 = s @ s
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye - a[..., None, None] * s + b[..., None, None] * s2


def so3_right_jacobian_inv(v: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of the SO(3) exponential."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    t2 = theta * theta
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0,
        (1.0 / (safe * safe)) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    s = skew(v)
    s2 = s @ s
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye + 0.5 * s + c[..., None, None] * s2


def so3_left_jacobian_inv(v: np.ndarray) -> np.ndarray:
    return so3_right_jacobian_inv(-np.asarray(v, dtype=float))


def slerp_tangent_weights(phi: np.ndarray, alphas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact derivative of slerp w.r.t. right-tangent endpoint perturbations.

    For R(a) = R_b @ exp(a * phi) with phi = log(R_b^T R_e), returns matrices
    (M_b, M_e) per alpha such that a right perturbation delta of R_b (resp.
    R_e) perturbs R(a) by the right-tangent M_b @ delta (resp. M_e @ delta):

        M_b = exp(a phi)^T - a * Jr(a phi) @ Jl^-1(phi)
        M_e = a * Jr(a phi) @ Jr^-1(phi)

    Shapes: phi (3,), alphas (n,) -> two (n, 3, 3) arrays.
    """
    alphas = np.asarray(alphas, dtype=float)
    aphi = alphas[:, None] * phi[None, :]
    jr_a = so3_right_jacobian(aphi)
    m_e = alphas[:, None, None] * (jr_a @ so3_right_jacobian_inv(phi))
    m_b = np.swapaxes(so3_exp(aphi), -1, -2) - alphas[:, None, None] * (
        jr_a @ so3_left_jacobian_inv(phi)
    )
    return m_b, m_e


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True)
class Pose:
    """Rigid transform: unit quaternion (w, x, y, z) plus translation (m)."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(quat_from_matrix(rotation), translation)

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat_from_rotvec(np.asarray(rotvec, dtype=float)), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), self.rotation @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.q)
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.t))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply R @ p + t to one point (3,) or a batch (n, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.t

    def rotation_angle_to(self, other: "Pose") -> float:
        """Relative rotation angle in radians."""
        return quat_angle(quat_multiply(quat_conjugate(self.q), other.q))

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Pose(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


@dataclass(frozen=True)
class TrajectoryFrame:
    """Begin/end poses bracketing one scan; the intra-scan trajectory is
    their interpolation, and consecutive frames may be discontinuous."""

    begin: Pose
    end: Pose
    scan_index: int = 0
    tau_begin: float = 0.0
    tau_end: float = 0.0

    def relative(self) -> Pose:
        """Intra-scan motion: begin^-1 o end."""
        return self.begin.inverse().compose(self.end)


def interpolate_pose(frame: TrajectoryFrame, alpha: float) -> Pose:
    """Pose at normalized time alpha in [0, 1]: slerp rotation, lerp translation."""
    a = min(max(float(alpha), 0.0), 1.0)
    if a == 0.0:
        return frame.begin
    if a == 1.0:
        return frame.end
    q = slerp(frame.begin.q, frame.end.q, a)
    t = (1.0 - a) * frame.begin.t + a * frame.end.t
    return Pose(q, t)


def interpolate_many(frame: TrajectoryFrame, alphas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched interpolation: returns rotations (n, 3, 3) and translations (n, 3)."""
    alphas = np.clip(np.asarray(alphas, dtype=float), 0.0, 1.0)
    q_b, q_e = frame.begin.q, frame.end.q
    if float(np.dot(q_b, q_e)) < 0.0:
        q_e = -q_e
    phi = quat_to_rotvec(quat_multiply(quat_conjugate(q_b), q_e))
    qs = quat_multiply(q_b[None, :], quat_from_rotvec(alphas[:, None] * phi[None, :]))
    rots = quat_to_matrix(qs)
    ts = (1.0 - alphas)[:, None] * frame.begin.t + alphas[:, None] * frame.end.t
    return rots, ts


def transform_point(pose: Pose, p: np.ndarray) -> np.ndarray:
    return pose.transform(p)


def fit_rigid_transform(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rigid alignment mapping source points onto target points.

    Closed form via SVD of the cross-covariance, determinant corrected so only
    proper rotations are returned. No scale.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise DegenerateInput("point sets must both be (n, 3) with equal n")
    n = source.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 point pairs, got {n}")
    centroid_s = source.mean(axis=0)
    centroid_t = target.mean(axis=0)
    h = (source - centroid_s).T @ (target - centroid_t)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1.0) * 1e-12:
        raise DegenerateInput("cross-covariance is rank deficient (collinear points?)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = centroid_t - rot @ centroid_s
    return Pose.from_rt(rot, trans)
