"""Loop detection on bird's-eye elevation grids.

Windows of N_map consecutive registered scans (N_overlap shared between
neighbors) are aggregated, expressed in a gravity-aligned frame anchored at
the window's middle pose, and rasterized into a per-cell max-height image
inside a 10 m band starting slightly below the ground. Two grids are matched
by an exhaustive 1-degree yaw sweep where each rotation is scored by masked
normalized cross-correlation over all 2D shifts (computed with FFTs so the
full shift space costs one correlation), then refined by a single 2D
point-to-raster least-squares fit. Accepted matches become loop constraints
between the anchor scans.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft
from scipy.spatial import cKDTree

from . import geometry as geo
from .errors import DegenerateGrid
from .geometry import Pose, TrajectoryFrame
from .scan import Scan


@dataclass
class GridParams:
    cell_size: float = 0.5
    n_map: int = 100
    n_overlap: int = 30
    z_band: float = 10.0  # z_max = z_min + z_band
    ground_offset: float = 0.5  # z_min sits this far below the ground estimate
    min_valid_fraction: float = 0.10
    ground_radius: float = 15.0  # horizontal radius of the ground estimate
    # optional horizontal crop around the anchor. Off by default: anchors up
    # to search_radius apart still need 30% of their cells to overlap, and a
    # tight crop can leave two distant-but-matchable grids short of that.
    max_radius: Optional[float] = None


@dataclass
class MatchParams:
    min_correlation: float = 0.7
    min_overlap_fraction: float = 0.3  # of the smaller grid's valid cells
    yaw_step_deg: float = 1.0
    search_radius: float = 100.0  # anchor distance gate for detect_loops
    min_separation: int = 3  # in grid indices
    min_overlap_cells: int = 10
    refine_radius_cells: float = 2.0
    refine_max_dz: float = 1.0


@dataclass
class ElevationGrid:
    """Max-height raster in the anchor's gravity-aligned frame.

    Cell (i, j) covers x in [(origin[0]+i)*c, ..+c), y likewise; invalid
    cells hold NaN.
    """

    n_start: int
    n_end: int
    anchor_scan: int
    anchor: Pose  # world pose, roll/pitch removed
    cell_size: float
    origin_cell: np.ndarray  # (2,) ints, raster cell (0,0) in anchor cells
    raster: np.ndarray  # (h, w) max z, NaN where empty

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.raster)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def cell_points(self):
        """Valid cell centers in the anchor frame plus their heights."""
        ii, jj = np.nonzero(self.valid)
        xy = (np.stack([ii, jj], axis=1) + self.origin_cell + 0.5) * self.cell_size
        return xy, self.raster[ii, jj]


def _yaw_of(rotation: np.ndarray) -> float:
    return float(np.arctan2(rotation[1, 0], rotation[0, 0]))


def gravity_aligned(pose: Pose) -> Pose:
    """Strip roll and pitch, keeping yaw and translation."""
    yaw = _yaw_of(pose.rotation)
    return Pose.from_rotvec(np.array([0.0, 0.0, yaw]), pose.t.copy())


def build_elevation_grid(
    frames: Sequence[TrajectoryFrame],
    scans: Sequence[Scan],
    n_start: int,
    params: Optional[GridParams] = None,
) -> ElevationGrid:
    """Aggregate one window of registered scans into an elevation raster.

    frames and scans are the window content, index-aligned. The anchor is
    the gravity-aligned mid-scan pose of the middle frame.
    """
    params = params if params is not None else GridParams()
    if len(frames) != len(scans) or not frames:
        raise ValueError("window frames and scans must align and be non-empty")
    mid = len(frames) // 2
    anchor = gravity_aligned(geo.interpolate_pose(frames[mid], 0.5))
    anchor_inv = anchor.inverse()

    chunks = []
    for frame, scan in zip(frames, scans):
        alphas = scan.alphas if scan.alphas is not None else np.zeros(len(scan))
        rots, ts = geo.interpolate_many(frame, alphas)
        world = np.einsum("mij,mj->mi", rots, scan.positions) + ts
        chunks.append(world @ anchor_inv.rotation.T + anchor_inv.t)
    pts = np.concatenate(chunks, axis=0)

    horiz = np.linalg.norm(pts[:, :2], axis=1)
    near = pts[horiz <= params.ground_radius, 2]
    ground = float(np.percentile(near, 2.0)) if near.size else float(pts[:, 2].min())
    z_min = ground - params.ground_offset
    z_max = z_min + params.z_band
    band = pts[(pts[:, 2] >= z_min) & (pts[:, 2] <= z_max)]
    if params.max_radius is not None and band.shape[0]:
        band = band[np.linalg.norm(band[:, :2], axis=1) <= params.max_radius]
    if band.shape[0] == 0:
        raise DegenerateGrid("no points inside the elevation band")

    cells = np.floor(band[:, :2] / params.cell_size).astype(np.int64)
    origin = cells.min(axis=0)
    size = cells.max(axis=0) - origin + 1
    raster = np.full(tuple(size), -np.inf)
    np.maximum.at(raster, (cells[:, 0] - origin[0], cells[:, 1] - origin[1]), band[:, 2])
    raster[np.isinf(raster)] = np.nan

    valid_fraction = np.count_nonzero(np.isfinite(raster)) / raster.size
    if valid_fraction < params.min_valid_fraction:
        raise DegenerateGrid(
            f"only {valid_fraction:.1%} of cells valid, need {params.min_valid_fraction:.0%}"
        )
    mid_frame = frames[mid]
    return ElevationGrid(
        n_start=n_start,
        n_end=n_start + len(frames),
        anchor_scan=mid_frame.scan_index,
        anchor=anchor,
        cell_size=params.cell_size,
        origin_cell=origin,
        raster=raster,
    )


def grid_windows(n_scans: int, params: Optional[GridParams] = None) -> list[tuple[int, int]]:
    """Window layout: stride n_map - n_overlap, plus a final window flushed
    against the end so a revisit at the very end of a run is still covered."""
    params = params if params is not None else GridParams()
    stride = params.n_map - params.n_overlap
    if stride <= 0:
        raise ValueError("n_map must exceed n_overlap")
    out = []
    start = 0
    while start + params.n_map <= n_scans:
        out.append((start, start + params.n_map))
        start += stride
    if out and out[-1][1] < n_scans:
        out.append((n_scans - params.n_map, n_scans))
    return out


@dataclass(frozen=True)
class LoopConstraint:
    """2D rigid match lifted later to SE(3): p_a = Rz(yaw) p_b + (x, y, 0),
    with p_a/p_b in the two anchors' gravity-aligned frames."""

    grid_a: int
    grid_b: int
    scan_a: int
    scan_b: int
    x: float
    y: float
    yaw: float  # radians
    score: float

    def relative_pose(self) -> Pose:
        return Pose.from_rotvec(
            np.array([0.0, 0.0, self.yaw]), np.array([self.x, self.y, 0.0])
        )


def _rotate_raster(grid: ElevationGrid, yaw: float):
    """Resample the raster rotated by yaw about the anchor origin.

    Nearest-neighbor inverse mapping; heights are rotation invariant.
    Returns (raster, origin_cell) in the rotated frame.
    """
    c = grid.cell_size
    h, w = grid.raster.shape
    x0 = grid.origin_cell[0] * c
    y0 = grid.origin_cell[1] * c
    corners = np.array(
        [[x0, y0], [x0 + h * c, y0], [x0, y0 + w * c], [x0 + h * c, y0 + w * c]]
    )
    ca, sa = np.cos(yaw), np.sin(yaw)
    rot = np.array([[ca, -sa], [sa, ca]])
    rotated = corners @ rot.T
    new_origin = np.floor(rotated.min(axis=0) / c).astype(np.int64)
    new_size = np.ceil(rotated.max(axis=0) / c).astype(np.int64) - new_origin
    new_size = np.maximum(new_size, 1)

    ii, jj = np.meshgrid(
        np.arange(new_size[0]), np.arange(new_size[1]), indexing="ij"
    )
    centers = (np.stack([ii, jj], axis=-1) + new_origin + 0.5) * c
    src = centers.reshape(-1, 2) @ rot  # inverse rotation: R(-yaw) = R.T
    si = np.floor(src[:, 0] / c).astype(np.int64) - grid.origin_cell[0]
    sj = np.floor(src[:, 1] / c).astype(np.int64) - grid.origin_cell[1]
    ok = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    out = np.full(new_size[0] * new_size[1], np.nan)
    out[ok] = grid.raster[si[ok], sj[ok]]
    return out.reshape(new_size[0], new_size[1]), new_origin


class _MaskedCorrelator:
    """Masked normalized cross-correlation of one fixed image against many
    moving images, over all integer 2D shifts, via FFT products.

    Double precision is load-bearing: the variance terms are differences of
    large near-equal sums, and on flat terrain the cancellation leaves a
    value near zero that single precision would swamp with FFT roundoff,
    turning structureless overlaps into perfect-looking correlations.
    """

    def __init__(self, image: np.ndarray, max_shape: tuple):
        self.f = np.nan_to_num(image)
        self.mask = np.isfinite(image).astype(float)
        self.shape_f = image.shape
        # full linear correlation needs shape_f + max_shape - 1; round up to
        # FFT-friendly sizes (a prime dimension here is an order of magnitude
        # slower through Bluestein's algorithm)
        self.pad = (
            sfft.next_fast_len(self.shape_f[0] + max_shape[0] - 1, real=True),
            sfft.next_fast_len(self.shape_f[1] + max_shape[1] - 1, real=True),
        )
        fixed = np.stack([self.mask, self.f * self.mask, self.f * self.f * self.mask])
        F = sfft.rfft2(fixed, self.pad, axes=(-2, -1))
        self.F_m, self.F_f, self.F_ff = F[0], F[1], F[2]

    def run(self, moving: np.ndarray, min_count: int):
        """Best NCC over shifts with at least min_count overlapping valid
        cells; returns (score, flat_shift_index) or None. Shift d means
        moving-cell u aligns with fixed-cell u + d."""
        t = np.nan_to_num(moving)
        m = np.isfinite(moving).astype(float)
        # correlation via conjugate product: c[d] = sum_x f[x] * t[x - d]
        T_m = np.conj(sfft.rfft2(m, self.pad))
        n = np.round(sfft.irfft2(self.F_m * T_m, self.pad))
        ok = np.flatnonzero(n.ravel() >= min_count)
        if ok.size == 0:
            return None

        T = np.conj(sfft.rfft2(np.stack([t * m, t * t * m]), self.pad, axes=(-2, -1)))
        T_t, T_tt = T[0], T[1]
        prods = np.stack(
            [
                self.F_f * T_m,
                self.F_m * T_t,
                self.F_f * T_t,
                self.F_ff * T_m,
                self.F_m * T_tt,
            ]
        )
        maps = sfft.irfft2(prods, self.pad, axes=(-2, -1)).reshape(5, -1)
        sum_f, sum_t, sum_ft, sum_ff, sum_tt = maps[:, ok]
        n_ok = n.ravel()[ok]

        cov = sum_ft - sum_f * sum_t / n_ok
        var_f = sum_ff - sum_f * sum_f / n_ok
        var_t = sum_tt - sum_t * sum_t / n_ok
        with np.errstate(invalid="ignore", divide="ignore"):
            ncc = cov / np.sqrt(np.maximum(var_f, 0) * np.maximum(var_t, 0))
        ncc[(var_f <= 1e-6) | (var_t <= 1e-6)] = -np.inf
        k = int(np.argmax(ncc))
        if not np.isfinite(ncc[k]):
            return None
        return float(ncc[k]), int(ok[k])


def _shift_to_offset(flat_idx: int, pad: tuple, moving_shape: tuple) -> np.ndarray:
    """Map a flat argmax in the padded correlation to a signed 2D shift."""
    d = np.array(np.unravel_index(flat_idx, pad), dtype=np.int64)
    for k in range(2):
        if d[k] > pad[k] - moving_shape[k]:
            d[k] -= pad[k]
    return d


def _refine_match(a: ElevationGrid, b: ElevationGrid, yaw: float, t_xy: np.ndarray, params: MatchParams):
    """One least-squares pass pairing b's transformed valid cells to a's
    nearest valid cells (height gated) and refitting the 2D rigid motion."""
    a_xy, a_z = a.cell_points()
    b_xy, b_z = b.cell_points()
    ca, sa = np.cos(yaw), np.sin(yaw)
    rot = np.array([[ca, -sa], [sa, ca]])
    moved = b_xy @ rot.T + t_xy
    tree = cKDTree(a_xy)
    dist, nearest = tree.query(moved, distance_upper_bound=params.refine_radius_cells * a.cell_size)
    ok = np.isfinite(dist)
    ok[ok] &= np.abs(a_z[nearest[ok]] - b_z[ok]) <= params.refine_max_dz
    if np.count_nonzero(ok) < 3:
        return yaw, t_xy
    src = b_xy[ok]
    dst = a_xy[nearest[ok]]
    src_c = src - src.mean(axis=0)
    dst_c = dst - dst.mean(axis=0)
    h = src_c.T @ dst_c
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r2 = vt.T @ np.diag([1.0, d]) @ u.T
    yaw_ref = float(np.arctan2(r2[1, 0], r2[0, 0]))
    t_ref = dst.mean(axis=0) - r2 @ src.mean(axis=0)
    return yaw_ref, t_ref


def match_grids(
    a: ElevationGrid, b: ElevationGrid, params: Optional[MatchParams] = None
) -> Optional[LoopConstraint]:
    """Exhaustive yaw sweep + masked NCC over shifts; None when no candidate
    clears the correlation and overlap thresholds."""
    params = params if params is not None else MatchParams()
    if abs(a.cell_size - b.cell_size) > 1e-12:
        raise ValueError("grids must share cell_size")
    min_overlap = max(
        params.min_overlap_cells,
        int(np.ceil(params.min_overlap_fraction * min(a.n_valid, b.n_valid))),
    )
    # the padded FFT workspace must fit the largest rotated footprint
    diag = int(np.ceil(np.hypot(*b.raster.shape))) + 2
    correlator = _MaskedCorrelator(a.raster, (diag, diag))

    yaws = np.deg2rad(np.arange(0.0, 360.0, params.yaw_step_deg))
    best = None
    for yaw in yaws:
        moving, moving_origin = _rotate_raster(b, yaw)
        hit = correlator.run(moving, min_overlap)
        if hit is None:
            continue
        score, idx = hit
        if best is None or score > best[0]:
            d = _shift_to_offset(idx, correlator.pad, moving.shape)
            t_cells = a.origin_cell + d - moving_origin
            best = (score, float(yaw), t_cells * a.cell_size)
    if best is None or best[0] < params.min_correlation:
        return None
    score, yaw, t_xy = best
    yaw, t_xy = _refine_match(a, b, yaw, np.asarray(t_xy, dtype=float), params)
    return LoopConstraint(
        grid_a=-1,
        grid_b=-1,
        scan_a=a.anchor_scan,
        scan_b=b.anchor_scan,
        x=float(t_xy[0]),
        y=float(t_xy[1]),
        yaw=float(yaw),
        score=min(1.0, max(0.0, score)),
    )


def detect_loops(
    grids: Sequence[ElevationGrid], params: Optional[MatchParams] = None
) -> list[LoopConstraint]:
    """Match every grid against earlier grids that are close in space but
    separated in sequence; all accepted matches become constraints."""
    params = params if params is not None else MatchParams()
    out = []
    for j in range(len(grids)):
        for i in range(j):
            if j - i < params.min_separation:
                continue
            gap = np.linalg.norm(grids[i].anchor.t - grids[j].anchor.t)
            if gap > params.search_radius:
                continue
            hit = match_grids(grids[i], grids[j], params)
            if hit is not None:
                out.append(
                    LoopConstraint(
                        grid_a=i,
                        grid_b=j,
                        scan_a=hit.scan_a,
                        scan_b=hit.scan_b,
                        x=hit.x,
                        y=hit.y,
                        yaw=hit.yaw,
                        score=hit.score,
                    )
                )
    return out


def export_pgm(grid: ElevationGrid, path):
    """Grayscale dump for eyeballing: invalid = 0, valid scaled 1..255."""
    raster = grid.raster
    valid = np.isfinite(raster)
    img = np.zeros(raster.shape, dtype=np.uint8)
    if valid.any():
        lo = raster[valid].min()
        hi = raster[valid].max()
        span = hi - lo if hi > lo else 1.0
        img[valid] = (1.0 + 254.0 * (raster[valid] - lo) / span).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.tobytes())
