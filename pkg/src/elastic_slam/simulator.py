"""Deterministic synthetic spinning-LiDAR simulator.

Worlds are small lists of analytic primitives (planes, rectangles, axis
aligned boxes) so every ray hit is exact and checkable against the primitive
equation. The sensor trajectory is a chain of segments with constant
translational acceleration and constant body-frame angular velocity, so the
pose is closed-form at any time. Each scan sweeps azimuth 0 -> 360 degrees
linearly over its time window and every column is fired from the exact
interpolated pose, which is what puts real motion distortion into the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import geometry as geo
from .geometry import Pose, TrajectoryFrame
from .scan import Scan

_EPS = 1e-12


# -- world primitives ---------------------------------------------------------


@dataclass(frozen=True)
class InfinitePlane:
    point: np.ndarray
    normal: np.ndarray  # unit

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        denom = dirs @ self.normal
        num = (self.point - origins) @ self.normal
        t = np.where(np.abs(denom) > _EPS, num / np.where(denom == 0, 1, denom), np.inf)
        return np.where(t > 0, t, np.inf)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs((points - self.point) @ self.normal)


@dataclass(frozen=True)
class Rectangle:
    """Finite plane patch: center, two orthonormal in-plane axes, half sizes."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = self.normal
        denom = dirs @ n
        num = (self.center - origins) @ n
        t = np.where(np.abs(denom) > _EPS, num / np.where(denom == 0, 1, denom), np.inf)
        t = np.where(t > 0, t, np.inf)
        with np.errstate(invalid="ignore"):
            hit = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
            local = hit - self.center
            inside = (np.abs(local @ self.axis_u) <= self.half_u) & (
                np.abs(local @ self.axis_v) <= self.half_v
            )
        return np.where(inside, t, np.inf)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs((points - self.center) @ self.normal)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, slab intersection test."""

    lo: np.ndarray
    hi: np.ndarray

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        safe = np.where(dirs == 0.0, _EPS, dirs)
        t1 = (self.lo - origins) / safe
        t2 = (self.hi - origins) / safe
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        hit = (t_near <= t_far) & (t_far > 0)
        t = np.where(t_near > 0, t_near, t_far)  # inside the box: exit face
        return np.where(hit, t, np.inf)

    def distance(self, points: np.ndarray) -> np.ndarray:
        # distance to the nearest face plane, for surface-accuracy checks
        d_lo = np.abs(points - self.lo)
        d_hi = np.abs(points - self.hi)
        return np.minimum(d_lo, d_hi).min(axis=1)


@dataclass
class World:
    primitives: list = field(default_factory=list)

    def cast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Range of the nearest positive hit per ray; inf for misses."""
        n = origins.shape[0]
        best = np.full(n, np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.intersect(origins, dirs))
        return best

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the closest primitive surface."""
        best = np.full(points.shape[0], np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.distance(points))
        return best


# -- ground-truth trajectory ---------------------------------------------------


@dataclass(frozen=True)
class _Segment:
    t0: float
    t1: float
    p0: np.ndarray
    v0: np.ndarray
    acc: np.ndarray
    q0: np.ndarray
    omega: np.ndarray  # body frame, rad/s


class GroundTruthTrajectory:
    """Piecewise constant-acceleration / constant-angular-velocity pose path.

    Continuous by construction; query any time in [t_begin, t_end].
    """

    def __init__(self, segments: list[_Segment]):
        if not segments:
            raise ValueError("trajectory needs at least one segment")
        self.segments = segments
        self._starts = np.asarray([s.t0 for s in segments])

    @property
    def t_begin(self) -> float:
        return self.segments[0].t0

    @property
    def t_end(self) -> float:
        return self.segments[-1].t1

    def poses_at(self, times: np.ndarray):
        """Batched pose query -> (rotations (n,3,3), translations (n,3))."""
        times = np.asarray(times, dtype=float).reshape(-1)
        idx = np.searchsorted(self._starts, times, side="right") - 1
        idx = np.clip(idx, 0, len(self.segments) - 1)
        rots = np.empty((times.size, 3, 3))
        trans = np.empty((times.size, 3))
        for si in np.unique(idx):
            seg = self.segments[si]
            sel = idx == si
            dt = times[sel] - seg.t0
            trans[sel] = seg.p0 + np.outer(dt, seg.v0) + 0.5 * np.outer(dt * dt, seg.acc)
            r0 = geo.quat_to_matrix(seg.q0)
            rots[sel] = r0 @ geo.so3_exp(np.outer(dt, seg.omega))
        return rots, trans

    def pose_at(self, t: float) -> Pose:
        rots, trans = self.poses_at(np.asarray([t]))
        return Pose.from_rt(rots[0], trans[0])


class TrajectoryBuilder:
    def __init__(self, start: Optional[Pose] = None, t0: float = 0.0):
        start = start if start is not None else Pose.identity()
        self._t = float(t0)
        self._p = start.t.copy()
        self._v = np.zeros(3)
        self._q = start.q.copy()
        self._segments: list[_Segment] = []

    def segment(self, duration: float, acc=(0.0, 0.0, 0.0), omega=(0.0, 0.0, 0.0)):
        """Append a segment; the state chains so the path stays continuous."""
        if duration <= 0:
            raise ValueError("segment duration must be positive")
        acc = np.asarray(acc, dtype=float)
        omega = np.asarray(omega, dtype=float)
        seg = _Segment(
            self._t,
            self._t + duration,
            self._p.copy(),
            self._v.copy(),
            acc,
            self._q.copy(),
            omega,
        )
        self._segments.append(seg)
        self._p = seg.p0 + seg.v0 * duration + 0.5 * acc * duration * duration
        self._v = seg.v0 + acc * duration
        self._q = geo.quat_multiply(self._q, geo.quat_from_rotvec(omega * duration))
        self._t += duration
        return self

    def set_velocity(self, v):
        self._v = np.asarray(v, dtype=float).copy()
        return self

    def build(self) -> GroundTruthTrajectory:
        return GroundTruthTrajectory(list(self._segments))


# -- sensor + scan synthesis ---------------------------------------------------


@dataclass(frozen=True)
class SensorSpec:
    beams: int = 32
    vfov_deg: tuple = (-20.0, 10.0)
    azimuth_step_deg: float = 0.4
    max_range: float = 80.0
    min_range: float = 0.5
    noise_sigma: float = 0.01

    @property
    def n_columns(self) -> int:
        return int(round(360.0 / self.azimuth_step_deg))


def simulate_scan(
    world: World,
    trajectory: GroundTruthTrajectory,
    t_begin: float,
    t_end: float,
    sensor: SensorSpec,
    rng: Optional[np.random.Generator] = None,
    index: int = 0,
):
    """One full revolution over [t_begin, t_end].

    Returns (scan, exact ground-truth frame). Points are reported in the
    firing-time sensor frame, so a moving sensor yields a motion-distorted
    cloud exactly like real hardware. Rays that miss everything or fall
    outside [min_range, max_range] are dropped.
    """
    n_cols = sensor.n_columns
    az = np.deg2rad(np.arange(n_cols) * sensor.azimuth_step_deg)
    alphas_col = np.arange(n_cols) / n_cols
    times_col = t_begin + alphas_col * (t_end - t_begin)
    el = np.deg2rad(np.linspace(sensor.vfov_deg[0], sensor.vfov_deg[1], sensor.beams))

    cos_el = np.cos(el)
    dirs_local = np.empty((n_cols, sensor.beams, 3))
    dirs_local[:, :, 0] = np.cos(az)[:, None] * cos_el[None, :]
    dirs_local[:, :, 1] = np.sin(az)[:, None] * cos_el[None, :]
    dirs_local[:, :, 2] = np.sin(el)[None, :]

    rots, trans = trajectory.poses_at(times_col)
    dirs_world = np.einsum("cij,cbj->cbi", rots, dirs_local).reshape(-1, 3)
    origins = np.repeat(trans, sensor.beams, axis=0)

    ranges = world.cast(origins, dirs_world)
    if rng is not None and sensor.noise_sigma > 0:
        ranges = ranges + rng.normal(0.0, sensor.noise_sigma, ranges.shape)
    ok = (ranges >= sensor.min_range) & (ranges <= sensor.max_range)

    points = dirs_local.reshape(-1, 3) * np.where(np.isfinite(ranges), ranges, 0.0)[:, None]
    alphas = np.repeat(alphas_col, sensor.beams)
    stamps = np.repeat(times_col, sensor.beams)
    scan = Scan(
        positions=points[ok],
        alphas=alphas[ok],
        raw_timestamps=stamps[ok],
        index=index,
        tau_begin=t_begin,
        tau_end=t_end,
    )
    frame = TrajectoryFrame(
        begin=trajectory.pose_at(t_begin),
        end=trajectory.pose_at(t_end),
        scan_index=index,
        tau_begin=t_begin,
        tau_end=t_end,
    )
    return scan, frame


# -- scenarios -----------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    world: World
    trajectory: GroundTruthTrajectory
    sensor: SensorSpec
    n_scans: int
    scan_period: float = 0.1

    def scan_window(self, n: int) -> tuple[float, float]:
        return n * self.scan_period, (n + 1) * self.scan_period

    def frames(self) -> list[TrajectoryFrame]:
        """Exact ground-truth frame per scan."""
        out = []
        for n in range(self.n_scans):
            t0, t1 = self.scan_window(n)
            out.append(
                TrajectoryFrame(
                    self.trajectory.pose_at(t0),
                    self.trajectory.pose_at(t1),
                    n,
                    t0,
                    t1,
                )
            )
        return out

    def scans(self, seed: int = 0) -> Iterator[Scan]:
        rng = np.random.default_rng(seed)
        for n in range(self.n_scans):
            t0, t1 = self.scan_window(n)
            scan, _ = simulate_scan(
                self.world, self.trajectory, t0, t1, self.sensor, rng, index=n
            )
            yield scan


def _corridor_world(length: float, half_width: float, seed: int = 7) -> World:
    """Floor, ceiling, two side walls, end caps, and staggered pillars that
    break the along-axis translation ambiguity a bare corridor would have.

    Surfaces sit off round coordinates on purpose: a wall exactly on a map
    voxel boundary makes every point on it flip voxels under millimeter pose
    perturbations, which no real building does.
    """
    rng = np.random.default_rng(seed)
    up = np.array([0.0, 0.0, 1.0])
    world = World(
        [
            InfinitePlane(np.array([0.0, 0.0, -1.53]), up),
            InfinitePlane(np.array([0.0, 0.0, 2.58]), -up),
            InfinitePlane(np.array([0.0, half_width, 0.0]), np.array([0.0, -1.0, 0.0])),
            InfinitePlane(np.array([0.0, -half_width, 0.0]), np.array([0.0, 1.0, 0.0])),
            Rectangle(
                np.array([length, 0.0, 0.5]),
                np.array([0.0, 1.0, 0.0]),
                np.array([0.0, 0.0, 1.0]),
                half_width,
                4.2,
            ),
            Rectangle(
                np.array([-15.37, 0.0, 0.5]),
                np.array([0.0, 1.0, 0.0]),
                np.array([0.0, 0.0, 1.0]),
                half_width,
                4.2,
            ),
        ]
    )
    # wall pillars on both sides plus transverse ceiling beams; the beams and
    # pillar faces are what pins translation along the corridor axis, so they
    # need to be visible at many azimuths and elevations at once
    for side in (1.0, -1.0):
        x = 2.31 + 1.7 * rng.random()
        while x < length - 4.0:
            depth = 0.4 + 0.5 * rng.random()
            width = 0.6 + 0.9 * rng.random()
            height = 1.5 + 1.5 * rng.random()
            y_in = side * (half_width - depth)
            y_out = side * half_width
            lo = np.array([x, min(y_in, y_out), -1.53])
            hi = np.array([x + width, max(y_in, y_out), -1.53 + height])
            world.primitives.append(Box(lo, hi))
            x += 3.0 + 2.5 * rng.random()
    x = 5.11
    while x < length - 4.0:
        world.primitives.append(
            Box(
                np.array([x, -half_width, 2.08]),
                np.array([x + 0.35, half_width, 2.58]),
            )
        )
        x += 7.0 + 3.0 * rng.random()
    return world


def _town_world(radius: float, seed: int = 11) -> World:
    """Ground plane ringed by box buildings inside and outside a circular
    street at `radius`."""
    rng = np.random.default_rng(seed)
    world = World([InfinitePlane(np.array([0.0, 0.0, -1.5]), np.array([0.0, 0.0, 1.0]))])
    for ring_r, count in ((radius + 12.0, 26), (radius - 12.0, 16)):
        for i in range(count):
            ang = 2.0 * np.pi * (i + 0.35 * rng.random()) / count
            cx = ring_r * np.cos(ang)
            cy = ring_r * np.sin(ang)
            sx = 3.0 + 5.0 * rng.random()
            sy = 3.0 + 5.0 * rng.random()
            h = 3.0 + 6.0 * rng.random()
            lo = np.array([cx - sx / 2, cy - sy / 2, -1.5])
            hi = np.array([cx + sx / 2, cy + sy / 2, -1.5 + h])
            world.primitives.append(Box(lo, hi))
    return world


RAMP_TIME = 2.0  # all scenarios accelerate from rest over this many seconds


def make_scenario(name: str, scan_period: float = 0.1) -> Scenario:
    """Named reproducible worlds + trajectories; see each branch.

    Every trajectory starts at rest and ramps up, like a real vehicle or
    handheld run; launching at full speed would make the very first scan
    motion-distorted with no prior scan to estimate that motion from.
    """
    if name == "straight_corridor":
        n_scans = 300
        speed = 5.0
        total = n_scans * scan_period
        distance = 0.5 * speed * RAMP_TIME + speed * (total - RAMP_TIME)
        world = _corridor_world(length=distance + 25.37, half_width=4.31)
        traj = (
            TrajectoryBuilder()
            .segment(RAMP_TIME, acc=[speed / RAMP_TIME, 0.0, 0.0])
            .segment(total - RAMP_TIME + 1.0)
            .build()
        )
        return Scenario(name, world, traj, SensorSpec(), n_scans, scan_period)

    if name == "curved_town_loop":
        speed = 8.0
        radius = 400.0 / (2.0 * np.pi)
        # ramp arc + cruise arc = exactly one lap, so the path closes
        ramp_arc = 0.5 * speed * RAMP_TIME
        lap_time = RAMP_TIME + (400.0 - ramp_arc) / speed
        n_scans = int(np.floor(lap_time / scan_period))
        world = _town_world(radius)
        start = Pose.from_rotvec(np.array([0.0, 0.0, np.pi / 2]), np.array([radius, 0.0, 0.0]))
        traj = _circular_trajectory(start, radius, speed, RAMP_TIME, lap_time + 1.0)
        return Scenario(name, world, traj, SensorSpec(), n_scans, scan_period)

    if name == "shaky_handheld":
        n_scans = 200
        speed = 6.0
        total = n_scans * scan_period
        distance = 0.5 * speed * RAMP_TIME + speed * (total - RAMP_TIME)
        world = _corridor_world(length=distance + 25.37, half_width=5.23, seed=13)
        builder = TrajectoryBuilder().segment(
            RAMP_TIME, acc=[speed / RAMP_TIME, 0.0, 0.0]
        )
        # continuous 2 Hz pitch oscillation, +-10 deg at the scan boundaries.
        # The sine is sampled at the boundaries and traversed at a constant
        # rate inside each scan window, so the rotation a single sweep sees
        # is steady even though consecutive scans differ by up to ~12 deg.
        freq = 2.0
        amp = np.deg2rad(10.0) / np.sin(2.0 * np.pi * freq * scan_period)
        n_seg = int(np.ceil((total - RAMP_TIME + 1.0) / scan_period))
        pitch = 0.0
        for k in range(1, n_seg + 1):
            target = amp * np.sin(2.0 * np.pi * freq * k * scan_period)
            builder.segment(scan_period, omega=[0.0, (target - pitch) / scan_period, 0.0])
            pitch = target
        return Scenario(name, world, builder.build(), SensorSpec(), n_scans, scan_period)

    if name == "yaw_jump":
        n_scans = 120
        speed = 3.0
        total = n_scans * scan_period
        distance = 0.5 * speed * RAMP_TIME + speed * (total - RAMP_TIME)
        world = _corridor_world(length=distance + 25.37, half_width=2.67, seed=17)
        builder = TrajectoryBuilder().segment(
            RAMP_TIME, acc=[speed / RAMP_TIME, 0.0, 0.0]
        )
        # a 6 degree yaw slew once every 8 scans, each filling exactly one
        # scan period so the yaw rate is constant while the sensor sweeps;
        # the alternating sign keeps the path inside the corridor
        jump = np.deg2rad(6.0)
        sgn = 1.0
        t = RAMP_TIME
        while t < total + 1.0:
            builder.segment(7 * scan_period)
            builder.segment(scan_period, omega=[0.0, 0.0, sgn * jump / scan_period])
            # steer back so net heading stays down the corridor
            sgn = -sgn
            t += 8 * scan_period
        builder.segment(1.0)
        return Scenario(name, world, builder.build(), SensorSpec(), n_scans, scan_period)

    raise ValueError(f"unknown scenario {name!r}")


def _circular_trajectory(
    start: Pose, radius: float, speed: float, ramp_time: float, duration: float
) -> GroundTruthTrajectory:
    """Circular drive discretized into short constant-velocity arc chords,
    with a linear speed ramp from rest over the first ramp_time seconds.
    50 ms chords keep the chord-vs-arc error small against a 63 m radius."""
    dt = 0.05
    n = int(np.ceil(duration / dt))
    acc = speed / ramp_time
    builder = TrajectoryBuilder(start)
    s = 0.0  # arc length driven so far
    for i in range(n):
        t_mid = (i + 0.5) * dt
        v = min(acc * t_mid, speed)  # midpoint speed, exact for a linear ramp
        ang = s / radius
        builder.set_velocity(v * np.array([-np.sin(ang), np.cos(ang), 0.0]))
        builder.segment(dt, omega=[0.0, 0.0, v / radius])
        s += v * dt
    return builder.build()
