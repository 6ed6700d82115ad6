"""Scan containers, range clipping, and grid keypoint sampling."""

import numpy as np
import pytest

from elastic_slam.errors import EmptyScan
from elastic_slam.scan import (
    Scan,
    clip_by_range,
    grid_sample_keypoints,
    pack_voxel_keys,
    unpack_voxel_keys,
)


def random_scan(rng, n=1000, scale=50.0):
    return Scan(rng.uniform(-scale, scale, (n, 3)), alphas=np.linspace(0, 1, n))


# -- clip_by_range ---------------------------------------------------------------


def test_clip_identity_gate():
    rng = np.random.default_rng(0)
    scan = random_scan(rng)
    out = clip_by_range(scan, 0.0, np.inf)
    assert np.array_equal(out.positions, scan.positions)
    assert np.array_equal(out.alphas, scan.alphas)


def test_clip_all_removed_raises():
    scan = Scan(np.array([[3.0, 0.0, 0.0]]))
    with pytest.raises(EmptyScan):
        clip_by_range(scan, 5.0, 100.0)


def test_clip_matches_linear_oracle():
    rng = np.random.default_rng(1)
    scan = random_scan(rng, n=5000)
    r_min, r_max = 10.0, 60.0
    # oracle: plain per-point loop
    keep = [i for i in range(len(scan)) if r_min <= np.linalg.norm(scan.positions[i]) <= r_max]
    out = clip_by_range(scan, r_min, r_max)
    assert np.array_equal(out.positions, scan.positions[keep])
    assert np.array_equal(out.alphas, scan.alphas[keep])


def test_clip_rejects_bad_gates():
    scan = Scan(np.ones((3, 3)))
    with pytest.raises(ValueError):
        clip_by_range(scan, 5.0, 5.0)
    with pytest.raises(ValueError):
        clip_by_range(scan, -1.0, 5.0)


# -- grid_sample_keypoints --------------------------------------------------------


def test_sample_single_cell():
    rng = np.random.default_rng(2)
    scan = Scan(rng.uniform(0.1, 0.9, (50, 3)))
    out = grid_sample_keypoints(scan, 1.0)
    assert len(out) == 1


def test_sample_spaced_grid_keeps_all():
    g = np.arange(5) * 2.0
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    scan = Scan(pts)
    out = grid_sample_keypoints(scan, 1.5)
    assert len(out) == len(scan)


def test_sample_count_matches_bucket_oracle():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 100, (10000, 3))
    scan = Scan(pts)
    cell = 1.5
    # oracle: hash every point to its cell, count distinct cells
    cells = {tuple(c) for c in np.floor(pts / cell).astype(int)}
    out = grid_sample_keypoints(scan, cell)
    assert len(out) == len(cells)


def test_sample_membership_and_cell_uniqueness():
    rng = np.random.default_rng(4)
    scan = random_scan(rng, n=3000, scale=20.0)
    cell = 1.0
    out = grid_sample_keypoints(scan, cell)
    assert len(out) <= len(scan)
    # every output point is one of the inputs
    pos_set = {tuple(p) for p in scan.positions}
    for p in out.positions:
        assert tuple(p) in pos_set
    # no two outputs share a cell
    cells = [tuple(c) for c in np.floor(out.positions / cell).astype(int)]
    assert len(cells) == len(set(cells))


def test_sample_idempotent():
    rng = np.random.default_rng(5)
    scan = random_scan(rng, n=2000, scale=30.0)
    once = grid_sample_keypoints(scan, 1.2)
    twice = grid_sample_keypoints(once, 1.2)
    assert np.array_equal(once.positions, twice.positions)


def test_sample_picks_closest_to_cell_center():
    # cell [0,1)^3 center (0.5, 0.5, 0.5); second point is closer
    pts = np.array([[0.1, 0.1, 0.1], [0.5, 0.5, 0.45], [0.9, 0.9, 0.9]])
    out = grid_sample_keypoints(Scan(pts), 1.0)
    assert len(out) == 1
    assert np.allclose(out.positions[0], pts[1])


def test_sample_tie_break_lowest_index():
    # two points symmetric about the center: equal distance, keep the first
    pts = np.array([[0.4, 0.5, 0.5], [0.6, 0.5, 0.5]])
    out = grid_sample_keypoints(Scan(pts), 1.0)
    assert np.allclose(out.positions[0], pts[0])


def test_sample_output_ordered_by_original_index():
    rng = np.random.default_rng(6)
    scan = random_scan(rng, n=2000, scale=15.0)
    out = grid_sample_keypoints(scan, 1.0)
    # alphas are monotone in the input, so order is visible through them
    assert np.all(np.diff(out.alphas) > 0)


def test_sample_preserves_alphas():
    rng = np.random.default_rng(7)
    scan = random_scan(rng, n=500, scale=5.0)
    out = grid_sample_keypoints(scan, 0.5)
    for i in range(len(out)):
        j = np.where((scan.positions == out.positions[i]).all(axis=1))[0][0]
        assert out.alphas[i] == scan.alphas[j]


def test_sample_negative_coordinates_use_floor():
    # -0.1 and +0.1 straddle a cell boundary and must land in different cells
    pts = np.array([[-0.1, 0.5, 0.5], [0.1, 0.5, 0.5]])
    out = grid_sample_keypoints(Scan(pts), 1.0)
    assert len(out) == 2


# -- voxel key packing -------------------------------------------------------------


def test_voxel_key_round_trip():
    rng = np.random.default_rng(8)
    ijk = rng.integers(-100000, 100000, size=(5000, 3))
    codes = pack_voxel_keys(ijk)
    assert np.array_equal(unpack_voxel_keys(codes), ijk)


def test_voxel_keys_injective():
    rng = np.random.default_rng(9)
    ijk = np.unique(rng.integers(-500, 500, size=(10000, 3)), axis=0)
    codes = pack_voxel_keys(ijk)
    assert len(np.unique(codes)) == len(ijk)
