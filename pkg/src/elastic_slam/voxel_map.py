"""Sparse voxel map of world-frame points with bounded per-voxel occupancy.

Voxels are keyed by floor(p / voxel_size) packed into an int64. Each voxel
stores at most `max_points` points, no two closer than `min_distance`, and
stops accepting points once full. Neighborhood queries gather candidates from
the (2*ring+1)^3 voxels around the query and run a batched k-nearest +
covariance + eigendecomposition pass, so a whole keypoint set is processed
per call instead of per point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateNeighborhood, EmptyNeighborhood
from .scan import pack_voxel_keys, unpack_voxel_keys

DEFAULT_MAX_POINTS = 20
DEFAULT_MIN_DISTANCE = 0.10


@dataclass(frozen=True)
class InsertionReport:
    inserted: int
    rejected: int


@dataclass(frozen=True)
class NeighborhoodStats:
    """k-nearest neighbors around a query plus the plane fitted to them.

    a2d = (sigma2 - sigma3) / sigma1 from the square roots of the
    neighborhood covariance eigenvalues (sigma1 >= sigma2 >= sigma3).
    """

    neighbors: np.ndarray  # (m, 3), sorted by distance to the query
    normal: np.ndarray  # unit (3,)
    a2d: float
    closest: np.ndarray  # (3,), nearest neighbor


@dataclass
class BatchNeighborhoods:
    """Struct-of-arrays result of a batched neighborhood query.

    Entries with counts[i] == 0 found no candidates at all; entries with
    0 < counts[i] < min_neighbors are degenerate and must be skipped by the
    caller. normals are oriented toward the per-query view point.
    """

    counts: np.ndarray  # (q,) valid neighbors found
    neighbors: np.ndarray  # (q, k, 3); slots >= counts[i] are meaningless
    distances: np.ndarray  # (q, k) squared distances, inf in unused slots
    closest: np.ndarray  # (q, 3)
    normals: np.ndarray  # (q, 3)
    a2d: np.ndarray  # (q,)


def _neighbor_offsets(ring: int) -> np.ndarray:
    r = np.arange(-ring, ring + 1, dtype=np.int64)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


class VoxelMap:
    """Hash-of-voxels local map; single writer, reads between insertions."""

    def __init__(
        self,
        voxel_size: float,
        max_points: int = DEFAULT_MAX_POINTS,
        min_distance: float = DEFAULT_MIN_DISTANCE,
    ):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.max_points = int(max_points)
        self.min_distance = float(min_distance)
        cap = 1024
        self._codes = np.zeros(cap, dtype=np.int64)
        self._storage = np.zeros((cap, self.max_points, 3), dtype=float)
        self._norms = np.zeros((cap, self.max_points), dtype=float)
        self._counts = np.zeros(cap, dtype=np.int64)
        self._rows: dict[int, int] = {}
        self._n_voxels = 0
        self._n_points = 0
        self._sorted_codes = np.empty(0, dtype=np.int64)
        self._sorted_rows = np.empty(0, dtype=np.int64)
        self._dirty = False

    # -- bookkeeping --------------------------------------------------------

    def __len__(self) -> int:
        return self._n_voxels

    @property
    def n_points(self) -> int:
        return self._n_points

    def voxel_points(self, key) -> np.ndarray:
        """Points stored in voxel (i, j, k); empty array if absent."""
        code = int(pack_voxel_keys(np.asarray(key, dtype=np.int64)))
        row = self._rows.get(code)
        if row is None:
            return np.empty((0, 3))
        return self._storage[row, : self._counts[row]].copy()

    def voxel_keys(self) -> np.ndarray:
        return unpack_voxel_keys(self._codes[: self._n_voxels])

    def all_points(self) -> np.ndarray:
        """All stored points, insertion-ordered row by row."""
        n = self._n_voxels
        if n == 0:
            return np.empty((0, 3))
        mask = np.arange(self.max_points)[None, :] < self._counts[:n, None]
        return self._storage[:n][mask]

    def _grow(self, needed: int):
        cap = self._codes.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, cap * 2)
        self._codes = np.resize(self._codes, new_cap)
        self._counts = np.resize(self._counts, new_cap)
        storage = np.zeros((new_cap, self.max_points, 3), dtype=float)
        storage[: self._n_voxels] = self._storage[: self._n_voxels]
        self._storage = storage
        norms = np.zeros((new_cap, self.max_points), dtype=float)
        norms[: self._n_voxels] = self._norms[: self._n_voxels]
        self._norms = norms

    def _ensure_sorted(self):
        if self._dirty or self._sorted_codes.shape[0] != self._n_voxels:
            order = np.argsort(self._codes[: self._n_voxels], kind="stable")
            self._sorted_codes = self._codes[: self._n_voxels][order]
            self._sorted_rows = order.astype(np.int64)
            self._dirty = False

    def _lookup_rows(self, codes: np.ndarray) -> np.ndarray:
        """Vectorized code -> storage row (-1 when the voxel is absent)."""
        self._ensure_sorted()
        if self._sorted_codes.shape[0] == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_codes, codes)
        pos = np.minimum(pos, self._sorted_codes.shape[0] - 1)
        rows = self._sorted_rows[pos]
        rows = np.where(self._sorted_codes[pos] == codes, rows, -1)
        return rows

    # -- insertion / eviction ------------------------------------------------

    def insert_scan(self, points: np.ndarray) -> InsertionReport:
        """Offer world-frame points in order; each lands in its voxel unless
        the voxel is full or an already-stored point lies within
        min_distance."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n_in = points.shape[0]
        if n_in == 0:
            return InsertionReport(0, 0)
        codes = pack_voxel_keys(np.floor(points / self.voxel_size).astype(np.int64))

        # Points aimed at already-full voxels can be dropped up front; a voxel
        # can only fill further during this call, never reopen.
        rows = self._lookup_rows(codes)
        full = (rows >= 0) & (self._counts[np.clip(rows, 0, None)] >= self.max_points)
        rejected = int(np.count_nonzero(full))
        if rejected == n_in:
            return InsertionReport(0, rejected)
        points = points[~full]
        codes = codes[~full]

        inserted = 0
        min_d2 = self.min_distance * self.min_distance
        order = np.argsort(codes, kind="stable")
        boundaries = np.flatnonzero(np.diff(codes[order])) + 1
        for group in np.split(order, boundaries):
            code = int(codes[group[0]])
            row = self._rows.get(code)
            if row is None:
                self._grow(self._n_voxels + 1)
                row = self._n_voxels
                self._n_voxels += 1
                self._codes[row] = code
                self._counts[row] = 0
                self._rows[code] = row
                self._dirty = True
            count = int(self._counts[row])
            slots = self._storage[row]
            for gi in group:
                if count >= self.max_points:
                    break
                p = points[gi]
                if count and np.min(np.einsum("ij,ij->i", slots[:count] - p, slots[:count] - p)) < min_d2:
                    continue
                slots[count] = p
                self._norms[row, count] = p @ p
                count += 1
                inserted += 1
            self._counts[row] = count
        self._n_points += inserted
        return InsertionReport(inserted, n_in - inserted)

    def evict_far_voxels(self, center: np.ndarray, radius: float) -> int:
        """Remove voxels whose center is farther than radius from `center`."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        n = self._n_voxels
        if n == 0 or not np.isfinite(radius):
            return 0
        center = np.asarray(center, dtype=float).reshape(3)
        centers = (unpack_voxel_keys(self._codes[:n]) + 0.5) * self.voxel_size
        keep = np.linalg.norm(centers - center, axis=1) <= radius
        evicted = int(np.count_nonzero(~keep))
        if evicted == 0:
            return 0
        keep_idx = np.flatnonzero(keep)
        self._codes[: keep_idx.size] = self._codes[keep_idx]
        self._counts[: keep_idx.size] = self._counts[keep_idx]
        self._storage[: keep_idx.size] = self._storage[keep_idx]
        self._norms[: keep_idx.size] = self._norms[keep_idx]
        self._n_voxels = keep_idx.size
        self._rows = {int(c): i for i, c in enumerate(self._codes[: self._n_voxels])}
        self._n_points = int(self._counts[: self._n_voxels].sum())
        self._dirty = True
        return evicted

    # -- queries -------------------------------------------------------------

    def counts_at(self, points: np.ndarray) -> np.ndarray:
        """Stored-point count of the voxel containing each query point."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        codes = pack_voxel_keys(np.floor(points / self.voxel_size).astype(np.int64))
        rows = self._lookup_rows(codes)
        counts = np.where(rows >= 0, self._counts[np.clip(rows, 0, None)], 0)
        return counts

    def query_neighborhoods(
        self,
        queries: np.ndarray,
        k: int = 20,
        ring: int = 1,
        view_points: Optional[np.ndarray] = None,
        chunk: int = 1024,
    ) -> BatchNeighborhoods:
        """Batched k-nearest-neighbor + plane-fit query.

        Candidates come from the (2*ring+1)^3 voxels around each query's own
        voxel. Normals point toward the matching view point (sensor origin);
        default view point is the world origin.
        """
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        nq = queries.shape[0]
        if view_points is None:
            view_points = np.zeros((nq, 3))
        else:
            view_points = np.broadcast_to(
                np.asarray(view_points, dtype=float), (nq, 3)
            )
        counts = np.zeros(nq, dtype=np.int64)
        neighbors = np.zeros((nq, k, 3))
        distances = np.full((nq, k), np.inf)
        closest = np.zeros((nq, 3))
        normals = np.zeros((nq, 3))
        a2d = np.zeros(nq)
        offsets = _neighbor_offsets(ring)
        self._ensure_sorted()
        for lo in range(0, nq, chunk):
            hi = min(lo + chunk, nq)
            self._query_chunk(
                queries[lo:hi],
                view_points[lo:hi],
                offsets,
                k,
                counts[lo:hi],
                neighbors[lo:hi],
                distances[lo:hi],
                closest[lo:hi],
                normals[lo:hi],
                a2d[lo:hi],
            )
        return BatchNeighborhoods(counts, neighbors, distances, closest, normals, a2d)

    def _query_chunk(self, q, views, offsets, k, counts, neighbors, distances, closest, normals, a2d):
        nq = q.shape[0]
        cap = self.max_points
        ijk = np.floor(q / self.voxel_size).astype(np.int64)
        codes = pack_voxel_keys(ijk[:, None, :] + offsets[None, :, :])  # (nq, o)
        rows = self._lookup_rows(codes)
        safe_rows = np.clip(rows, 0, None)
        occupancy = np.where(rows >= 0, self._counts[safe_rows], 0)  # (nq, o)
        cand = self._storage[safe_rows]  # (nq, o, cap, 3)
        # |p - q|^2 expanded with cached |q|^2 to avoid a (nq, o, cap, 3) temp
        d2 = self._norms[safe_rows] - 2.0 * np.einsum("qocd,qd->qoc", cand, q)
        d2 += np.einsum("qd,qd->q", q, q)[:, None, None]
        np.clip(d2, 0.0, None, out=d2)
        valid = np.arange(cap)[None, None, :] < occupancy[:, :, None]
        d2 = np.where(valid, d2, np.inf)

        n_cand = cand.shape[1] * cap
        d2 = d2.reshape(nq, n_cand)
        k_eff = min(k, n_cand)
        sel = np.argpartition(d2, k_eff - 1, axis=1)[:, :k_eff]
        d_sel = np.take_along_axis(d2, sel, axis=1)
        order = np.argsort(d_sel, axis=1, kind="stable")
        sel = np.take_along_axis(sel, order, axis=1)
        d_sel = np.take_along_axis(d_sel, order, axis=1)
        pts = np.take_along_axis(cand.reshape(nq, n_cand, 3), sel[:, :, None], axis=1)

        found = np.isfinite(d_sel)
        n_found = found.sum(axis=1)
        counts[:] = n_found
        neighbors[:, :k_eff] = pts
        distances[:, :k_eff] = d_sel
        closest[:] = pts[:, 0]

        w = found.astype(float)[:, :, None]
        denom = np.clip(n_found, 1, None).astype(float)
        mean = (pts * w).sum(axis=1) / denom[:, None]
        centered = (pts - mean[:, None, :]) * w
        cov = np.einsum("qki,qkj->qij", centered, centered) / denom[:, None, None]
        evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
        sig = np.sqrt(np.clip(evals, 0.0, None))
        a2d[:] = (sig[:, 1] - sig[:, 0]) / np.clip(sig[:, 2], 1e-12, None)
        nrm = evecs[:, :, 0]
        flip = np.einsum("qi,qi->q", nrm, views - closest) < 0.0
        nrm[flip] *= -1.0
        normals[:] = nrm

    def nearest_neighbors(
        self,
        query: np.ndarray,
        k: int = 20,
        ring: int = 1,
        view_point: Optional[np.ndarray] = None,
        min_neighbors: int = 5,
    ) -> NeighborhoodStats:
        """Single-query neighborhood; raises when the map is empty nearby."""
        query = np.asarray(query, dtype=float).reshape(3)
        batch = self.query_neighborhoods(
            query[None, :],
            k=k,
            ring=ring,
            view_points=None if view_point is None else np.asarray(view_point, dtype=float)[None, :],
        )
        n = int(batch.counts[0])
        if n == 0:
            raise EmptyNeighborhood("no map points in the voxels around the query")
        if n < min_neighbors:
            raise DegenerateNeighborhood(f"only {n} neighbors, need {min_neighbors}")
        return NeighborhoodStats(
            neighbors=batch.neighbors[0, :n].copy(),
            normal=batch.normals[0].copy(),
            a2d=float(batch.a2d[0]),
            closest=batch.closest[0].copy(),
        )
