"""Frame-to-map odometry loop.

Per scan: range clip, keypoint grid sampling, constant-velocity motion
prediction, elastic solve against the voxel map, failure checks with one
conservative retry, then conditional map insertion and eviction of far
voxels. Failures never abort a run; the frame falls back to the motion
prediction and is flagged in its report.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from . import geometry as geo
from .errors import EmptyScan, RegistrationFailed, SolverFailure, TooFewResiduals
from .geometry import Pose, TrajectoryFrame
from .registration import SolveReport, SolverConfig, solve
from .scan import Scan, clip_by_range, grid_sample_keypoints
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)

DRIVING = "driving"
HIGH_FREQUENCY = "high_frequency"


@dataclass
class PipelineConfig:
    profile: str = DRIVING
    voxel_size: float = 1.0
    keypoint_cell: float = 1.5
    eviction_radius: float = 150.0
    min_range: float = 1.0
    max_range: float = 100.0
    max_points_per_voxel: int = 20
    min_point_distance: float = 0.10
    solver: SolverConfig = field(default_factory=SolverConfig)
    # robust-profile thresholds
    max_begin_gap: float = 0.3  # meters between t_b and previous t_e
    max_empty_voxel_fraction: float = 0.2
    # a solve can clear the hard limits above yet still be marginal; past
    # these fractions of the limits it is redone with the conservative
    # profile before its frame can contaminate the map
    retry_gap_fraction: float = 0.5
    retry_empty_fraction: float = 0.5
    orientation_gate_deg: float = 5.0  # at or above: solve but do not insert
    retry_iterations: int = 10
    eval_alpha: float = 0.5  # which interpolated pose represents a scan
    # cold-start re-anchor fires only when scan 1 shows real motion; below
    # these the map rebuild would chase solver noise
    bootstrap_min_motion: float = 0.05  # meters
    bootstrap_min_rotation_deg: float = 0.5

    @classmethod
    def driving(cls, **overrides) -> "PipelineConfig":
        return cls(**overrides)

    @classmethod
    def high_frequency(cls, **overrides) -> "PipelineConfig":
        # fast orientation changes start far from the optimum: widen the
        # correspondence gate so distant surfaces stay matchable and give the
        # solver more iterations; the sharp robust scale keeps the extra
        # mismatches from biasing the solve
        base = dict(
            profile=HIGH_FREQUENCY,
            voxel_size=0.8,
            keypoint_cell=0.5,
            eviction_radius=60.0,
            solver=SolverConfig(
                robust_scale=0.1, max_iterations=10, outlier_gate=2.0
            ),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_profile(cls, name: str, **overrides) -> "PipelineConfig":
        name = name.replace("-", "_")
        if name == DRIVING:
            return cls.driving(**overrides)
        if name == HIGH_FREQUENCY:
            return cls.high_frequency(**overrides)
        raise ValueError(f"unknown profile {name!r}")


@dataclass
class ScanReport:
    scan_index: int
    solved: bool
    retried: bool
    failed: bool
    inserted: bool
    n_keypoints: int
    wall_ms: float
    map_voxels: int
    map_points: int
    begin_gap: float
    empty_voxel_fraction: float
    rotation_change_deg: float
    solve_report: Optional[SolveReport] = None


@dataclass
class OdometryState:
    config: PipelineConfig
    map: VoxelMap
    frames: list[TrajectoryFrame] = field(default_factory=list)
    reports: list[ScanReport] = field(default_factory=list)
    # first clipped scan, kept until the bootstrap second pass has run
    bootstrap_scan: Optional[Scan] = field(default=None, repr=False)

    @property
    def n_failures(self) -> int:
        return sum(1 for r in self.reports if r.failed)

    def mid_poses(self) -> list[Pose]:
        a = self.config.eval_alpha
        return [geo.interpolate_pose(f, a) for f in self.frames]

    def timings_ms(self) -> np.ndarray:
        return np.asarray([r.wall_ms for r in self.reports])


def make_state(config: Optional[PipelineConfig] = None) -> OdometryState:
    config = config if config is not None else PipelineConfig()
    vmap = VoxelMap(
        config.voxel_size,
        max_points=config.max_points_per_voxel,
        min_distance=config.min_point_distance,
    )
    return OdometryState(config=config, map=vmap)


def predict_initial_frame(prev_frames: list[TrajectoryFrame]) -> TrajectoryFrame:
    """Constant-velocity prior: continue the last relative motion.

    Scan 0 starts at identity; scan 1 has no velocity estimate yet so both
    poses sit at the previous end.
    """
    n = len(prev_frames)
    if n == 0:
        return TrajectoryFrame(Pose.identity(), Pose.identity(), 0)
    begin = prev_frames[-1].end
    if n == 1:
        return TrajectoryFrame(begin, begin, 1)
    step = prev_frames[-2].end.inverse() @ prev_frames[-1].end
    return TrajectoryFrame(begin, begin @ step, n)


def _world_points(frame: TrajectoryFrame, scan: Scan) -> np.ndarray:
    alphas = scan.alphas if scan.alphas is not None else np.zeros(len(scan))
    rots, ts = geo.interpolate_many(frame, alphas)
    return np.einsum("mij,mj->mi", rots, scan.positions) + ts


def _attempt_solve(
    state,
    keypoints,
    pred,
    prev,
    solver_cfg,
    check_gap=True,
    gap_limit=None,
    empty_limit=None,
):
    """One solve plus the robust-profile health checks; returns the frame,
    the report, and the measured health numbers.

    check_gap is off for scan 1: no velocity prior exists yet, so a genuine
    begin/end discontinuity against the bootstrap frame is expected. The
    limits default to the hard failure thresholds; the first attempt passes
    tighter ones so that marginal solves escalate to the retry.
    """
    frame, rep = solve(state.map, keypoints, pred, prev, solver_cfg)
    gap = float(np.linalg.norm(frame.begin.t - prev.end.t))
    kp_world = _world_points(frame, keypoints)
    empty = float(np.mean(state.map.counts_at(kp_world) == 0))
    cfg = state.config
    if gap_limit is None:
        gap_limit = cfg.max_begin_gap
    if empty_limit is None:
        empty_limit = cfg.max_empty_voxel_fraction
    if check_gap and gap > gap_limit:
        raise SolverFailure(f"begin/end gap {gap:.3f} m exceeds {gap_limit:g}")
    if empty > empty_limit:
        raise SolverFailure(
            f"{empty:.0%} of keypoints fell in empty voxels"
        )
    return frame, rep, gap, empty


def _bootstrap_second_pass(state, keypoints, frame1):
    """Undo the cold-start smear.

    Scan 0 went into the map with an identity frame even though the sensor
    may have been moving, so the initial map is motion-blurred and frame 1 is
    biased. Once scan 1 gives a velocity estimate, re-anchor frame 0 with the
    same relative motion (begin pinned at identity), rebuild the map from the
    re-distorted scan 0, and solve scan 1 again against the clean map.

    Returns None when the estimated motion is too small to matter. In that
    regime the re-solve would be fed its own solver noise as if it were real
    distortion, and repeating the pass amplifies rather than corrects it.
    """
    cfg = state.config
    scan0 = state.bootstrap_scan
    state.bootstrap_scan = None
    rel = frame1.begin.inverse() @ frame1.end
    small_shift = np.linalg.norm(rel.t) < cfg.bootstrap_min_motion
    small_turn = np.rad2deg(geo.quat_angle(rel.q)) < cfg.bootstrap_min_rotation_deg
    if small_shift and small_turn:
        return None
    old0 = state.frames[0]
    frame0 = TrajectoryFrame(
        Pose.identity(), rel, old0.scan_index, old0.tau_begin, old0.tau_end
    )
    rebuilt = VoxelMap(
        cfg.voxel_size,
        max_points=cfg.max_points_per_voxel,
        min_distance=cfg.min_point_distance,
    )
    rebuilt.insert_scan(_world_points(frame0, scan0))
    state.map = rebuilt
    state.frames[0] = frame0
    pred = TrajectoryFrame(
        frame0.end,
        frame0.end @ rel,
        frame1.scan_index,
        frame1.tau_begin,
        frame1.tau_end,
    )
    try:
        return _attempt_solve(
            state, keypoints, pred, frame0, cfg.solver, check_gap=False
        )
    except (TooFewResiduals, SolverFailure):
        # keep the first estimate; the map rebuild alone already helps
        gap = float(np.linalg.norm(frame1.begin.t - frame0.end.t))
        return frame1, None, gap, 0.0


def register_scan(state: OdometryState, scan: Scan) -> tuple[TrajectoryFrame, ScanReport]:
    """Estimate the scan's begin/end poses and fold it into the map."""
    cfg = state.config
    t_start = time.perf_counter()
    try:
        clipped = clip_by_range(scan, cfg.min_range, cfg.max_range)
        keypoints = grid_sample_keypoints(clipped, cfg.keypoint_cell)
    except EmptyScan:
        # nothing inside the range gates: a failure, not an abort
        clipped = None
        keypoints = None
    pred = predict_initial_frame(state.frames)
    pred = replace(
        pred, scan_index=scan.index, tau_begin=scan.tau_begin, tau_end=scan.tau_end
    )

    prev = state.frames[-1] if state.frames else None
    solved = False
    retried = False
    failed = False
    gap = 0.0
    empty = 0.0
    rep: Optional[SolveReport] = None

    if keypoints is None:
        failed = True
        frame = pred
        log.warning("scan %d: empty after range gating; using prediction", scan.index)
    elif prev is None:
        frame = pred  # bootstrap: the first scan defines the map origin
        state.bootstrap_scan = clipped
    else:
        first_solve = len(state.frames) == 1
        # a failed previous frame is prediction-only, so its end pose is not
        # trustworthy ground for the begin-gap health check
        prev_failed = bool(state.reports) and state.reports[-1].failed
        check_gap = not first_solve and not prev_failed
        try:
            frame, rep, gap, empty = _attempt_solve(
                state,
                keypoints,
                pred,
                prev,
                cfg.solver,
                check_gap=check_gap,
                gap_limit=cfg.max_begin_gap * cfg.retry_gap_fraction,
                empty_limit=cfg.max_empty_voxel_fraction * cfg.retry_empty_fraction,
            )
            solved = True
        except (TooFewResiduals, SolverFailure) as exc:
            log.info("scan %d: retrying after %s", scan.index, exc)
            retried = True
            retry_kp = grid_sample_keypoints(clipped, cfg.keypoint_cell / 2.0)
            retry_cfg = replace(
                cfg.solver, ring=2, max_iterations=cfg.retry_iterations
            )
            try:
                frame, rep, gap, empty = _attempt_solve(
                    state, retry_kp, pred, prev, retry_cfg, check_gap=check_gap
                )
                solved = True
                keypoints = retry_kp
            except (TooFewResiduals, SolverFailure) as exc2:
                log.warning(
                    "scan %d: registration failed (%s); using prediction",
                    scan.index,
                    exc2,
                )
                failed = True
                frame = pred
        if solved and first_solve and state.bootstrap_scan is not None:
            redo = _bootstrap_second_pass(state, keypoints, frame)
            if redo is not None:
                frame, rep2, gap, empty = redo
                rep = rep2 if rep2 is not None else rep

    rot_change = 0.0
    if prev is not None:
        rot_change = np.rad2deg(prev.end.rotation_angle_to(frame.end))

    insert = not failed and rot_change < cfg.orientation_gate_deg
    if insert:
        state.map.insert_scan(_world_points(frame, clipped))
        state.map.evict_far_voxels(frame.end.t, cfg.eviction_radius)

    wall_ms = (time.perf_counter() - t_start) * 1e3
    report = ScanReport(
        scan_index=scan.index,
        solved=solved,
        retried=retried,
        failed=failed,
        inserted=insert,
        n_keypoints=len(keypoints) if keypoints is not None else 0,
        wall_ms=wall_ms,
        map_voxels=len(state.map),
        map_points=state.map.n_points,
        begin_gap=gap,
        empty_voxel_fraction=empty,
        rotation_change_deg=float(rot_change),
        solve_report=rep,
    )
    state.frames.append(frame)
    state.reports.append(report)
    if failed:
        log.warning("scan %d flagged: %s", scan.index, RegistrationFailed.__name__)
    return frame, report


def run_odometry(scans: Iterable[Scan], config: Optional[PipelineConfig] = None) -> OdometryState:
    """Sequential registration of every scan from the source.

    RegistrationFailed scans are kept as flagged prediction-only frames; the
    run never aborts on them.
    """
    state = make_state(config)
    count = 0
    for scan in scans:
        register_scan(state, scan)
        count += 1
    if count == 0:
        raise ValueError("scan source produced no scans")
    mean_ms = float(np.mean(state.timings_ms()))
    log.info(
        "registered %d scans, %d failures, mean %.1f ms/scan",
        count,
        state.n_failures,
        mean_ms,
    )
    return state
