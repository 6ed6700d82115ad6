"""Scan containers and scan-level preprocessing (range gating, grid sampling).

A Scan keeps its points as (n, 3) arrays plus a parallel array of normalized
timestamps alpha in [0, 1]; per-point Python objects are only materialized on
demand through ScanPoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyScan


@dataclass(frozen=True)
class ScanPoint:
    position: np.ndarray
    alpha: float
    raw_timestamp: Optional[float] = None


@dataclass
class Scan:
    """Points of one sensor revolution, ordered by firing time."""

    positions: np.ndarray
    alphas: Optional[np.ndarray] = None
    raw_timestamps: Optional[np.ndarray] = None
    index: int = 0
    tau_begin: Optional[float] = None
    tau_end: Optional[float] = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 3)
        if self.alphas is not None:
            self.alphas = np.asarray(self.alphas, dtype=float).reshape(-1)
            if self.alphas.shape[0] != self.positions.shape[0]:
                raise ValueError("alphas length must match positions")
        if self.raw_timestamps is not None:
            self.raw_timestamps = np.asarray(self.raw_timestamps, dtype=float).reshape(-1)
            if self.raw_timestamps.shape[0] != self.positions.shape[0]:
                raise ValueError("raw_timestamps length must match positions")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> ScanPoint:
        return ScanPoint(
            self.positions[i],
            float(self.alphas[i]) if self.alphas is not None else 0.0,
            float(self.raw_timestamps[i]) if self.raw_timestamps is not None else None,
        )

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.positions, axis=1)

    def take(self, idx: np.ndarray) -> "Scan":
        """Subset scan keeping metadata; idx must preserve the wanted order."""
        return Scan(
            self.positions[idx],
            None if self.alphas is None else self.alphas[idx],
            None if self.raw_timestamps is None else self.raw_timestamps[idx],
            index=self.index,
            tau_begin=self.tau_begin,
            tau_end=self.tau_end,
        )


def clip_by_range(scan: Scan, r_min: float, r_max: float) -> Scan:
    """Keep points with r_min <= ||p|| <= r_max; raises EmptyScan if none survive."""
    if not (0.0 <= r_min < r_max):
        raise ValueError("require 0 <= r_min < r_max")
    r = scan.ranges
    keep = np.flatnonzero((r >= r_min) & (r <= r_max))
    if keep.size == 0:
        raise EmptyScan(f"range gate [{r_min}, {r_max}] removed all {len(scan)} points")
    return scan.take(keep)


def _cell_codes(positions: np.ndarray, cell_size: float) -> np.ndarray:
    """Pack floor(p / cell) into a single int64 per point (21 bits per axis)."""
    ijk = np.floor(positions / cell_size).astype(np.int64)
    return pack_voxel_keys(ijk)


def pack_voxel_keys(ijk: np.ndarray) -> np.ndarray:
    """Bijectively pack signed (i, j, k) triples into int64 (21 bits/axis)."""
    shifted = ijk + (1 << 20)
    if np.any((shifted < 0) | (shifted >= (1 << 21))):
        raise ValueError("voxel index out of the supported +-2^20 range")
    return (shifted[..., 0] << 42) | (shifted[..., 1] << 21) | shifted[..., 2]


def unpack_voxel_keys(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    k = (codes & ((1 << 21) - 1)) - (1 << 20)
    j = ((codes >> 21) & ((1 << 21) - 1)) - (1 << 20)
    i = (codes >> 42) - (1 << 20)
    return np.stack([i, j, k], axis=-1)


def grid_sample_keypoints(scan: Scan, cell_size: float) -> Scan:
    """Keep at most one point per cubic cell: the one closest to the cell
    center, ties broken by lowest original index; output ordered by original
    index."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    pos = scan.positions
    if pos.shape[0] == 0:
        return scan.take(np.array([], dtype=int))
    codes = _cell_codes(pos, cell_size)
    centers = (np.floor(pos / cell_size) + 0.5) * cell_size
    dist = np.linalg.norm(pos - centers, axis=1)
    idx = np.arange(pos.shape[0])
    order = np.lexsort((idx, dist, codes))
    _, first = np.unique(codes[order], return_index=True)
    winners = np.sort(order[first])
    return scan.take(winners)
