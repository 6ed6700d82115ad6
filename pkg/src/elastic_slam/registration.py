"""Elastic scan-to-map registration.

One scan is parameterized by a begin pose and an end pose; every point is
transformed by the pose interpolated at its own timestamp fraction, so the
scan can flex during alignment instead of being rigidly pre-corrected. The
cost is robustified point-to-plane against the voxel map plus two soft
consistency terms tying the begin pose to the previous scan's end pose
(location) and the within-scan translation to the previous one (velocity):

    F(x) = (1/m) sum_i rho(r_i^2)
           + beta_loc * ||t_b - t_e_prev||^2
           + beta_vel * ||(t_e - t_b) - (t_e_prev - t_b_prev)||^2

with r_i = a_i * n_i . (p_i^W - q_i^W) and rho the Cauchy loss. Minimized by
Gauss-Newton over the 12-dim tangent (rot_b, t_b, rot_e, t_e) with
right-multiplicative rotation updates, a small Levenberg diagonal, and a
step-halving line search. Correspondences are rebuilt at every iteration.

Two degraded modes exist for ablations: CONSTANT_VELOCITY_RIGID distorts the
scan once using the predicted motion and then optimizes a single rigid end
pose; NONE skips distortion entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo
from .errors import SolverFailure, TooFewResiduals
from .geometry import Pose, TrajectoryFrame
from .scan import Scan, ScanPoint
from .voxel_map import VoxelMap

ELASTIC = "elastic"
CONSTANT_VELOCITY_RIGID = "constant_velocity_rigid"
NONE = "none"
_MODES = (ELASTIC, CONSTANT_VELOCITY_RIGID, NONE)


@dataclass
class SolverConfig:
    mode: str = ELASTIC
    beta_loc: float = 1e-3
    beta_vel: float = 1e-3
    max_iterations: int = 5
    trans_tol: float = 1e-3  # meters, on the accepted step
    rot_tol: float = 0.01  # degrees, on the accepted step
    robust_scale: float = 0.3  # Cauchy scale c, meters
    outlier_gate: float = 0.5  # max point-to-plane distance, meters
    min_residuals: int = 20
    knn: int = 20
    ring: int = 1  # neighbor voxel ring: 1 -> 27 voxels, 2 -> 125
    min_neighbors: int = 5
    levenberg: float = 1e-6
    max_halvings: int = 4
    rot_gap_weight: float = 0.0  # optional begin-rotation continuity term

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown solver mode {self.mode!r}")


@dataclass(frozen=True)
class Residual:
    """One point-to-plane correspondence, kept for single-point inspection."""

    keypoint: ScanPoint
    neighbor_closest: np.ndarray  # q_i^W
    normal: np.ndarray  # n_i, unit
    weight: np.ndarray  # a_i in [0, 1]


@dataclass
class ResidualBatch:
    """Struct-of-arrays set of correspondences for one solver iteration.

    points/alphas are in the sensor frame; closest/normals are world-frame
    map quantities frozen at the guess the batch was built from.
    """

    points: np.ndarray  # (m, 3)
    alphas: np.ndarray  # (m,)
    closest: np.ndarray  # (m, 3)
    normals: np.ndarray  # (m, 3)
    weights: np.ndarray  # (m,)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> Residual:
        return Residual(
            keypoint=ScanPoint(self.points[i].copy(), float(self.alphas[i])),
            neighbor_closest=self.closest[i].copy(),
            normal=self.normals[i].copy(),
            weight=self.weights[i].copy(),
        )

    def values(self, frame: TrajectoryFrame) -> np.ndarray:
        rots, ts = geo.interpolate_many(frame, self.alphas)
        pw = np.einsum("mij,mj->mi", rots, self.points) + ts
        return self.weights * np.einsum("mi,mi->m", self.normals, pw - self.closest)


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_objective: float
    n_residuals: int
    step_trans_norm: float
    step_rot_norm: float  # radians
    converged: bool
    mode: str


def _cauchy(s: np.ndarray, c: float) -> np.ndarray:
    return c * c * np.log1p(s / (c * c))


def _cauchy_weight(s: np.ndarray, c: float) -> np.ndarray:
    return 1.0 / (1.0 + s / (c * c))


def build_residuals(
    vmap: VoxelMap,
    frame: TrajectoryFrame,
    keypoints: Scan,
    cfg: SolverConfig,
) -> ResidualBatch:
    """Associate keypoints to map planes under the given frame guess.

    Keypoints whose neighborhood is too thin or whose point-to-plane distance
    exceeds the outlier gate are dropped. Raises TooFewResiduals when fewer
    than cfg.min_residuals survive.
    """
    if len(vmap) == 0:
        raise TooFewResiduals("local map is empty")
    pts = keypoints.positions
    alphas = keypoints.alphas
    if alphas is None:
        alphas = np.zeros(pts.shape[0])
    rots, ts = geo.interpolate_many(frame, alphas)
    pw = np.einsum("mij,mj->mi", rots, pts) + ts
    batch = vmap.query_neighborhoods(
        pw, k=cfg.knn, ring=cfg.ring, view_points=ts
    )
    dist = np.abs(np.einsum("mi,mi->m", batch.normals, pw - batch.closest))
    keep = (batch.counts >= cfg.min_neighbors) & (dist <= cfg.outlier_gate)
    m = int(np.count_nonzero(keep))
    if m < cfg.min_residuals:
        raise TooFewResiduals(f"{m} residuals survived, need {cfg.min_residuals}")
    return ResidualBatch(
        points=np.ascontiguousarray(pts[keep]),
        alphas=np.ascontiguousarray(alphas[keep]),
        closest=np.ascontiguousarray(batch.closest[keep]),
        normals=np.ascontiguousarray(batch.normals[keep]),
        weights=np.clip(batch.a2d[keep], 0.0, 1.0),
    )


def objective(
    residuals: ResidualBatch,
    frame: TrajectoryFrame,
    prev_frame: TrajectoryFrame | None,
    cfg: SolverConfig,
) -> float:
    """Full cost of Eq. above for a fixed correspondence set."""
    m = len(residuals)
    total = 0.0
    if m:
        r = residuals.values(frame)
        total += float(np.sum(_cauchy(r * r, cfg.robust_scale))) / m
    if prev_frame is not None:
        gap = frame.begin.t - prev_frame.end.t
        total += cfg.beta_loc * float(gap @ gap)
        vel = (frame.end.t - frame.begin.t) - (prev_frame.end.t - prev_frame.begin.t)
        total += cfg.beta_vel * float(vel @ vel)
        if cfg.rot_gap_weight > 0.0:
            e = geo.quat_to_rotvec(
                geo.quat_multiply(geo.quat_conjugate(prev_frame.end.q), frame.begin.q)
            )
            total += cfg.rot_gap_weight * float(e @ e)
    return total


def _linearize_batch(residuals: ResidualBatch, frame: TrajectoryFrame):
    """Rows of d r_i / d (rot_b, t_b, rot_e, t_e) plus the values r_i."""
    p = residuals.points
    a = residuals.alphas
    n = residuals.normals
    w = residuals.weights
    rots, ts = geo.interpolate_many(frame, a)
    pw = np.einsum("mij,mj->mi", rots, p) + ts
    r = w * np.einsum("mi,mi->m", n, pw - residuals.closest)

    u = np.einsum("mji,mj->mi", rots, n)  # R(a)^T n
    g = w[:, None] * np.cross(p, u)  # d r / d (tangent rotation at alpha)
    phi = geo.quat_to_rotvec(
        geo.quat_multiply(geo.quat_conjugate(frame.begin.q), frame.end.q)
    )
    m_b, m_e = geo.slerp_tangent_weights(phi, a)
    jac = np.empty((p.shape[0], 12))
    jac[:, 0:3] = np.einsum("mi,mij->mj", g, m_b)
    jac[:, 3:6] = (w * (1.0 - a))[:, None] * n
    jac[:, 6:9] = np.einsum("mi,mij->mj", g, m_e)
    jac[:, 9:12] = (w * a)[:, None] * n
    return jac, r


def linearize(residual: Residual, frame: TrajectoryFrame, alpha: float):
    """Single-residual Jacobian row (12,) and residual value."""
    batch = ResidualBatch(
        points=residual.keypoint.position[None, :],
        alphas=np.asarray([alpha], dtype=float),
        closest=residual.neighbor_closest[None, :],
        normals=residual.normal[None, :],
        weights=np.asarray([residual.weight], dtype=float).reshape(1),
    )
    jac, r = _linearize_batch(batch, frame)
    return jac[0], float(r[0])


def _apply_step(frame: TrajectoryFrame, delta: np.ndarray) -> TrajectoryFrame:
    begin = Pose(
        geo.quat_multiply(frame.begin.q, geo.quat_from_rotvec(delta[0:3])),
        frame.begin.t + delta[3:6],
    )
    end = Pose(
        geo.quat_multiply(frame.end.q, geo.quat_from_rotvec(delta[6:9])),
        frame.end.t + delta[9:12],
    )
    return replace(frame, begin=begin, end=end)


def _solve_normal_equations(h: np.ndarray, g: np.ndarray, damping: float) -> np.ndarray:
    h = h + damping * np.eye(h.shape[0])
    try:
        delta = np.linalg.solve(h, -g)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure("normal equations singular") from exc
    if not np.all(np.isfinite(delta)):
        raise SolverFailure("non-finite Gauss-Newton step")
    return delta


def _line_search(frame, residuals, prev_frame, cfg, delta, apply, f_old):
    """Halve the step while it increases the fixed-correspondence cost."""
    for _ in range(cfg.max_halvings):
        cand = apply(frame, delta)
        if objective(residuals, cand, prev_frame, cfg) <= f_old:
            return cand, delta
        delta = 0.5 * delta
    return apply(frame, delta), delta


def _solve_elastic(vmap, keypoints, frame_init, prev_frame, cfg):
    frame = frame_init
    rot_tol = np.deg2rad(cfg.rot_tol)
    c2 = cfg.robust_scale * cfg.robust_scale
    report = None
    for it in range(cfg.max_iterations):
        residuals = build_residuals(vmap, frame, keypoints, cfg)
        m = len(residuals)
        jac, r = _linearize_batch(residuals, frame)
        w_irls = _cauchy_weight(r * r, cfg.robust_scale) / m
        h = (jac * w_irls[:, None]).T @ jac
        g = jac.T @ (w_irls * r)
        if prev_frame is not None:
            gap = frame.begin.t - prev_frame.end.t
            h[3:6, 3:6] += cfg.beta_loc * np.eye(3)
            g[3:6] += cfg.beta_loc * gap
            vel = (frame.end.t - frame.begin.t) - (
                prev_frame.end.t - prev_frame.begin.t
            )
            eye = np.eye(3)
            h[3:6, 3:6] += cfg.beta_vel * eye
            h[9:12, 9:12] += cfg.beta_vel * eye
            h[3:6, 9:12] -= cfg.beta_vel * eye
            h[9:12, 3:6] -= cfg.beta_vel * eye
            g[3:6] -= cfg.beta_vel * vel
            g[9:12] += cfg.beta_vel * vel
            if cfg.rot_gap_weight > 0.0:
                e = geo.quat_to_rotvec(
                    geo.quat_multiply(
                        geo.quat_conjugate(prev_frame.end.q), frame.begin.q
                    )
                )
                j = geo.so3_right_jacobian_inv(e)
                h[0:3, 0:3] += cfg.rot_gap_weight * (j.T @ j)
                g[0:3] += cfg.rot_gap_weight * (j.T @ e)
        delta = _solve_normal_equations(h, g, cfg.levenberg)
        f_old = objective(residuals, frame, prev_frame, cfg)
        frame, delta = _line_search(
            frame, residuals, prev_frame, cfg, delta, _apply_step, f_old
        )
        step_t = max(np.linalg.norm(delta[3:6]), np.linalg.norm(delta[9:12]))
        step_r = max(np.linalg.norm(delta[0:3]), np.linalg.norm(delta[6:9]))
        converged = step_t < cfg.trans_tol and step_r < rot_tol
        report = SolveReport(
            iterations=it + 1,
            final_objective=objective(residuals, frame, prev_frame, cfg),
            n_residuals=m,
            step_trans_norm=float(step_t),
            step_rot_norm=float(step_r),
            converged=converged,
            mode=cfg.mode,
        )
        if converged:
            break
    return frame, report


def _apply_rigid_step(pose: Pose, delta: np.ndarray) -> Pose:
    return Pose(
        geo.quat_multiply(pose.q, geo.quat_from_rotvec(delta[0:3])),
        pose.t + delta[3:6],
    )


def _solve_rigid(vmap, keypoints, frame_init, prev_frame, cfg):
    """Single-pose modes: optional constant-velocity pre-distortion, then
    classic rigid point-to-plane on the end pose."""
    pts = keypoints.positions
    if cfg.mode == CONSTANT_VELOCITY_RIGID and keypoints.alphas is not None:
        # Express every point as if captured at the scan end, using the
        # predicted motion: p~ = T_end^-1 * T(alpha) * p.
        rots, ts = geo.interpolate_many(frame_init, keypoints.alphas)
        pw = np.einsum("mij,mj->mi", rots, pts) + ts
        end_inv = frame_init.end.inverse()
        pts = pw @ end_inv.rotation.T + end_inv.t
    rigid = Scan(positions=pts, alphas=None, index=keypoints.index)

    pose = frame_init.end
    rel_back = frame_init.end.inverse() @ frame_init.begin  # end -> begin
    rot_tol = np.deg2rad(cfg.rot_tol)
    report = None
    converged = False
    it = 0
    for it in range(cfg.max_iterations):
        frame_rigid = TrajectoryFrame(pose, pose, frame_init.scan_index)
        residuals = build_residuals(vmap, frame_rigid, rigid, cfg)
        m = len(residuals)
        rots, ts = geo.interpolate_many(frame_rigid, residuals.alphas)
        pw = np.einsum("mij,mj->mi", rots, residuals.points) + ts
        r = residuals.weights * np.einsum(
            "mi,mi->m", residuals.normals, pw - residuals.closest
        )
        u = np.einsum("mji,mj->mi", rots, residuals.normals)
        jac = np.empty((m, 6))
        jac[:, 0:3] = residuals.weights[:, None] * np.cross(residuals.points, u)
        jac[:, 3:6] = residuals.weights[:, None] * residuals.normals
        w_irls = _cauchy_weight(r * r, cfg.robust_scale) / m
        h = (jac * w_irls[:, None]).T @ jac
        g = jac.T @ (w_irls * r)
        delta = _solve_normal_equations(h, g, cfg.levenberg)

        def apply(p, d):
            return _apply_rigid_step(p, d)

        def cost(p):
            fr = TrajectoryFrame(p, p, frame_init.scan_index)
            return objective(residuals, fr, None, cfg)

        f_old = cost(pose)
        for _ in range(cfg.max_halvings):
            cand = apply(pose, delta)
            if cost(cand) <= f_old:
                break
            delta = 0.5 * delta
        pose = apply(pose, delta)
        step_t = float(np.linalg.norm(delta[3:6]))
        step_r = float(np.linalg.norm(delta[0:3]))
        converged = step_t < cfg.trans_tol and step_r < rot_tol
        report = SolveReport(
            iterations=it + 1,
            final_objective=cost(pose),
            n_residuals=m,
            step_trans_norm=step_t,
            step_rot_norm=step_r,
            converged=converged,
            mode=cfg.mode,
        )
        if converged:
            break
    if cfg.mode == CONSTANT_VELOCITY_RIGID:
        begin = pose @ rel_back
    else:
        begin = pose
    frame = TrajectoryFrame(
        begin, pose, frame_init.scan_index, frame_init.tau_begin, frame_init.tau_end
    )
    return frame, report


def solve(
    vmap: VoxelMap,
    keypoints: Scan,
    frame_init: TrajectoryFrame,
    prev_frame: TrajectoryFrame | None,
    cfg: SolverConfig,
):
    """Register keypoints against the map starting from frame_init.

    Returns (frame, SolveReport). Raises TooFewResiduals or SolverFailure;
    the caller's robust profile decides what to do with those.
    """
    if cfg.mode == ELASTIC:
        return _solve_elastic(vmap, keypoints, frame_init, prev_frame, cfg)
    return _solve_rigid(vmap, keypoints, frame_init, prev_frame, cfg)
