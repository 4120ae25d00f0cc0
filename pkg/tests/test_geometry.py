"""Geometry oracles: every derived expectation is computed by an
independent brute-force reference in this file, never by the code under
test."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenemem import (CameraIntrinsics, DepthMap, PixelMask, PointCloud, Pose,
                      backproject, geometric_overlap, largest_cluster,
                      voxel_downsample)
from scenemem.geometry import GeometryInputError, project

from conftest import make_pose, rng


# -- brute-force references -------------------------------------------------

def brute_overlap(det: np.ndarray, trk: np.ndarray, delta: float) -> float:
    """O(n*m) overlap fraction, the reference the grid path must equal."""
    if det.shape[0] == 0:
        return 0.0
    if trk.shape[0] == 0:
        return 0.0
    diff = det[:, None, :] - trk[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return float((d2.min(axis=1) <= delta * delta).mean())


def brute_dbscan(pts: np.ndarray, eps: float, min_points: int) -> list[set[int]]:
    """Reference DBSCAN: cores by exhaustive neighborhood counts, clusters
    as connected core components, borders joining their lexicographically
    smallest core neighbor."""
    n = pts.shape[0]
    if n == 0:
        return []
    diff = pts[:, None, :] - pts[None, :, :]
    within = (diff * diff).sum(axis=2) <= eps * eps
    core = within.sum(axis=1) >= min_points
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    rank = np.empty(n, dtype=int)
    rank[order] = np.arange(n)
    labels = {}
    cluster_id = 0
    for i in range(n):
        if not core[i] or i in labels:
            continue
        stack = [i]
        labels[i] = cluster_id
        while stack:
            j = stack.pop()
            for q in np.flatnonzero(within[j] & core):
                if q not in labels:
                    labels[q] = cluster_id
                    stack.append(int(q))
        cluster_id += 1
    for i in range(n):
        if core[i] or not within[i][core].any():
            continue
        core_nbrs = np.flatnonzero(within[i] & core)
        owner = core_nbrs[np.argmin(rank[core_nbrs])]
        labels[i] = labels[int(owner)]
    clusters: dict[int, set[int]] = {}
    for i, lab in labels.items():
        clusters.setdefault(lab, set()).add(i)
    return list(clusters.values())


def brute_voxel_census(pts: np.ndarray, voxel: float) -> set[tuple[int, int, int]]:
    return {tuple(c) for c in np.floor(pts / voxel).astype(np.int64)}


def _points_set(cloud: PointCloud) -> set[tuple[float, float, float]]:
    return {tuple(p) for p in cloud.points}


# -- backproject --------------------------------------------------------------

class TestBackproject:
    def _intr(self):
        return CameraIntrinsics(fx=100.0, fy=120.0, cx=32.0, cy=24.0,
                                width=64, height=48)

    def test_principal_point_depth_one(self):
        intr = self._intr()
        depth = DepthMap(np.full((48, 64), 1.0))
        mask = PixelMask(64, 48, [(32, 24)])
        cloud = backproject(depth, mask, intr, Pose.identity())
        np.testing.assert_allclose(cloud.points, [[0.0, 0.0, 1.0]])

    def test_one_focal_length_off_center(self):
        # pixel (cx + fx, cy) at depth 2 -> x = (fx)*2/fx = 2
        intr = CameraIntrinsics(fx=20.0, fy=20.0, cx=10.0, cy=10.0,
                                width=32, height=32)
        depth = DepthMap(np.full((32, 32), 2.0))
        mask = PixelMask(32, 32, [(30, 10)])
        cloud = backproject(depth, mask, intr, Pose.identity())
        np.testing.assert_allclose(cloud.points, [[2.0, 0.0, 2.0]])

    def test_all_masked_pixels_invalid_depth(self):
        intr = self._intr()
        depth = DepthMap(np.zeros((48, 64)))
        mask = PixelMask.from_bbox((0, 0, 10, 10), 64, 48)
        cloud = backproject(depth, mask, intr, Pose.identity())
        assert cloud.is_empty

    def test_zero_depth_pixels_skipped(self):
        intr = self._intr()
        values = np.full((48, 64), 3.0)
        values[24, 32] = 0.0
        depth = DepthMap(values)
        mask = PixelMask(64, 48, [(32, 24), (33, 24)])
        cloud = backproject(depth, mask, intr, Pose.identity())
        assert len(cloud) == 1

    def test_nonfinite_depth_skipped(self):
        intr = self._intr()
        values = np.full((48, 64), 3.0)
        values[24, 32] = np.nan
        values[24, 33] = np.inf
        depth = DepthMap(values)
        mask = PixelMask(64, 48, [(32, 24), (33, 24), (34, 24)])
        assert len(backproject(depth, mask, intr, Pose.identity())) == 1

    def test_dimension_mismatch_rejected(self):
        intr = self._intr()
        depth = DepthMap(np.ones((10, 10)))
        mask = PixelMask(64, 48, [(0, 0)])
        with pytest.raises(GeometryInputError):
            backproject(depth, mask, intr, Pose.identity())

    def test_mask_dimension_mismatch_rejected(self):
        intr = self._intr()
        depth = DepthMap(np.ones((48, 64)))
        mask = PixelMask(10, 10, [(0, 0)])
        with pytest.raises(GeometryInputError):
            backproject(depth, mask, intr, Pose.identity())

    def test_pose_transform_applied(self):
        intr = self._intr()
        depth = DepthMap(np.full((48, 64), 2.0))
        mask = PixelMask(64, 48, [(32, 24)])
        pose = make_pose(yaw_deg=90.0, position=(1.0, 2.0, 3.0))
        cloud = backproject(depth, mask, intr, pose)
        # camera point (0, 0, 2): forward is world +y at yaw 90
        np.testing.assert_allclose(cloud.points, [[1.0, 4.0, 3.0]], atol=1e-12)

    def test_roundtrip_exact_pose(self):
        """Project the returned points back: pixels within 1e-6; depths are
        bit-exact for a pose whose rotation is an exact axis permutation
        and whose translation is zero (float addition with a translation
        necessarily rounds)."""
        intr = self._intr()
        g = rng(3)
        values = g.uniform(0.5, 5.0, size=(48, 64))
        depth = DepthMap(values)
        pixels = [(int(u), int(v)) for u, v in
                  zip(g.integers(0, 64, 200), g.integers(0, 48, 200))]
        mask = PixelMask(64, 48, pixels)
        # camera optical axis along world +y, exactly representable
        rot = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).T
        pose = Pose(rot.T, np.zeros(3))
        cloud = backproject(depth, mask, intr, pose)
        u, v, z = project(cloud, intr, pose)
        expected = mask.pixels  # sorted (v, u)
        np.testing.assert_allclose(u, expected[:, 0], atol=1e-6)
        np.testing.assert_allclose(v, expected[:, 1], atol=1e-6)
        assert np.array_equal(z, values[expected[:, 1], expected[:, 0]])

    def test_roundtrip_random_poses(self):
        intr = CameraIntrinsics(fx=80.0, fy=80.0, cx=47.5, cy=35.5,
                                width=96, height=72)
        g = rng(11)
        for _ in range(5):
            yaw = float(g.uniform(-180, 180))
            pitch = float(g.uniform(-45, 45))
            pos = g.uniform(-5, 5, 3)
            pose = make_pose(yaw_deg=yaw, position=pos, pitch_deg=pitch)
            values = g.uniform(0.3, 8.0, size=(72, 96))
            depth = DepthMap(values)
            pix = np.column_stack([g.integers(0, 96, 500), g.integers(0, 72, 500)])
            mask = PixelMask(96, 72, pix)
            cloud = backproject(depth, mask, intr, pose)
            u, v, z = project(cloud, intr, pose)
            expected = mask.pixels
            np.testing.assert_allclose(u, expected[:, 0], atol=1e-6)
            np.testing.assert_allclose(v, expected[:, 1], atol=1e-6)
            np.testing.assert_allclose(
                z, values[expected[:, 1], expected[:, 0]], atol=1e-9)


# -- voxel_downsample --------------------------------------------------------

class TestVoxelDownsample:
    def test_shared_cell_centroid(self):
        cloud = PointCloud([(0.001, 0, 0), (0.015, 0, 0)])
        out = voxel_downsample(cloud, 0.02)
        np.testing.assert_allclose(out.points, [[0.008, 0.0, 0.0]])

    def test_distinct_cells_unchanged(self):
        cloud = PointCloud([(0.01, 0, 0), (0.03, 0, 0)])
        out = voxel_downsample(cloud, 0.02)
        assert _points_set(out) == {(0.01, 0.0, 0.0), (0.03, 0.0, 0.0)}

    def test_census_matches_brute_force(self):
        g = rng(5)
        pts = g.uniform(0, 1, size=(10_000, 3))
        out = voxel_downsample(PointCloud(pts), 0.02)
        assert len(out) == len(brute_voxel_census(pts, 0.02))

    def test_output_order_lexicographic_by_cell(self):
        g = rng(6)
        pts = g.uniform(-2, 2, size=(500, 3))
        out = voxel_downsample(PointCloud(pts), 0.05)
        cells = np.floor(out.points / 0.05).astype(np.int64)
        keys = [tuple(c) for c in cells]
        assert keys == sorted(keys)

    def test_input_order_invariance(self):
        g = rng(7)
        pts = g.uniform(-1, 1, size=(300, 3))
        a = voxel_downsample(PointCloud(pts), 0.1)
        b = voxel_downsample(PointCloud(pts[::-1]), 0.1)
        assert np.array_equal(a.points, b.points)

    def test_every_input_point_covered(self):
        g = rng(8)
        pts = g.uniform(-1, 1, size=(200, 3))
        out = voxel_downsample(PointCloud(pts), 0.07)
        in_cells = brute_voxel_census(pts, 0.07)
        out_cells = brute_voxel_census(out.points, 0.07)
        assert in_cells == out_cells  # centroid stays inside its cell

    def test_idempotent(self):
        g = rng(9)
        pts = g.uniform(-3, 3, size=(1000, 3))
        once = voxel_downsample(PointCloud(pts), 0.02)
        twice = voxel_downsample(once, 0.02)
        assert np.array_equal(once.points, twice.points)

    def test_empty_cloud(self):
        assert voxel_downsample(PointCloud.empty(), 0.02).is_empty

    def test_invalid_voxel(self):
        with pytest.raises(GeometryInputError):
            voxel_downsample(PointCloud([(0, 0, 0)]), 0.0)

    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.02, 0.05, 0.13]))
    @settings(max_examples=25)
    def test_property_census_and_idempotence(self, seed, voxel):
        pts = rng(seed).uniform(-1, 1, size=(120, 3))
        out = voxel_downsample(PointCloud(pts), voxel)
        assert len(out) == len(brute_voxel_census(pts, voxel))
        again = voxel_downsample(out, voxel)
        assert np.array_equal(out.points, again.points)


# -- largest_cluster ----------------------------------------------------------

def _blob(center, n, spread, seed):
    return rng(seed).normal(loc=center, scale=spread, size=(n, 3))


class TestLargestCluster:
    def test_two_blobs_keeps_larger(self):
        big = _blob((0, 0, 0), 50, 0.1, 1)
        small = _blob((5, 5, 5), 10, 0.1, 2)
        pts = np.vstack([big, small])
        out = largest_cluster(PointCloud(pts), eps=0.5, min_points=5)
        assert len(out) == 50
        assert _points_set(out) == {tuple(p) for p in big}

    def test_all_noise_returns_empty(self):
        pts = np.array([(0, 0, 0), (10, 0, 0), (0, 10, 0)], dtype=float)
        out = largest_cluster(PointCloud(pts), eps=0.5, min_points=5)
        assert out.is_empty

    def test_single_blob_returned_as_set(self):
        blob = _blob((1, 1, 1), 40, 0.05, 3)
        out = largest_cluster(PointCloud(blob), eps=0.5, min_points=5)
        assert _points_set(out) == {tuple(p) for p in blob}

    def test_matches_brute_force_reference(self):
        for seed in range(20):
            g = rng(100 + seed)
            n_blobs = int(g.integers(1, 4))
            parts = [_blob(g.uniform(-4, 4, 3), int(g.integers(3, 40)),
                           float(g.uniform(0.03, 0.25)), 200 + seed * 7 + b)
                     for b, n in enumerate(range(n_blobs))]
            parts.append(g.uniform(-6, 6, size=(int(g.integers(0, 8)), 3)))
            pts = np.vstack(parts)
            mine = largest_cluster(PointCloud(pts), eps=0.5, min_points=5)
            clusters = brute_dbscan(pts, 0.5, 5)
            if not clusters:
                assert mine.is_empty
                continue
            rank = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
            order = np.empty(len(pts), dtype=int)
            order[rank] = np.arange(len(pts))
            best = min(clusters,
                       key=lambda c: (-len(c), min(order[i] for i in c)))
            assert _points_set(mine) == {tuple(pts[i]) for i in best}

    def test_subset_of_input_and_maximal(self):
        g = rng(42)
        pts = g.uniform(-1.5, 1.5, size=(400, 3))
        out = largest_cluster(PointCloud(pts), eps=0.3, min_points=4)
        in_set = {tuple(p) for p in pts}
        assert _points_set(out) <= in_set
        sizes = [len(c) for c in brute_dbscan(pts, 0.3, 4)]
        assert not sizes or len(out) >= max(sizes)

    def test_input_order_invariance(self):
        pts = np.vstack([_blob((0, 0, 0), 30, 0.1, 4), _blob((3, 0, 0), 30, 0.1, 5)])
        a = largest_cluster(PointCloud(pts), eps=0.5, min_points=5)
        b = largest_cluster(PointCloud(pts[::-1]), eps=0.5, min_points=5)
        assert np.array_equal(a.points, b.points)

    def test_size_tie_prefers_lexicographically_smallest(self):
        left = _blob((-3, 0, 0), 20, 0.05, 6)
        right = _blob((3, 0, 0), 20, 0.05, 7)
        out = largest_cluster(PointCloud(np.vstack([right, left])),
                              eps=0.5, min_points=5)
        assert _points_set(out) == {tuple(p) for p in left}

    def test_empty_cloud(self):
        assert largest_cluster(PointCloud.empty(), 0.5, 5).is_empty

    def test_parameter_validation(self):
        with pytest.raises(GeometryInputError):
            largest_cluster(PointCloud([(0, 0, 0)]), 0.0, 5)
        with pytest.raises(GeometryInputError):
            largest_cluster(PointCloud([(0, 0, 0)]), 0.5, 0)


# -- geometric_overlap ---------------------------------------------------------

class TestGeometricOverlap:
    def test_stated_example(self):
        det = PointCloud([(0, 0, 0), (1, 0, 0), (0, 0, 0.04), (2, 2, 2)])
        trk = PointCloud([(0, 0, 0), (1, 0, 0.03)])
        assert geometric_overlap(det, trk, 0.05) == 0.75

    def test_self_overlap_is_one(self):
        g = rng(12)
        pts = g.uniform(-1, 1, size=(50, 3))
        cloud = PointCloud(pts)
        assert geometric_overlap(cloud, cloud, 0.05) == 1.0

    def test_empty_detection_is_zero(self):
        assert geometric_overlap(PointCloud.empty(),
                                 PointCloud([(0, 0, 0)]), 0.05) == 0.0

    def test_empty_track_is_zero(self):
        assert geometric_overlap(PointCloud([(0, 0, 0)]),
                                 PointCloud.empty(), 0.05) == 0.0

    def test_grid_equals_brute_force(self):
        for seed in range(20):
            g = rng(300 + seed)
            det = g.uniform(0, 1, size=(int(g.integers(1, 200)), 3))
            trk = det + g.normal(0, 0.04, size=det.shape) \
                if seed % 2 else g.uniform(0, 1, size=(int(g.integers(1, 200)), 3))
            mine = geometric_overlap(PointCloud(det), PointCloud(trk), 0.05)
            assert mine == brute_overlap(det, trk, 0.05)

    def test_subset_overlap_is_one(self):
        g = rng(13)
        trk = g.uniform(-1, 1, size=(80, 3))
        det = trk[::3]
        assert geometric_overlap(PointCloud(det), PointCloud(trk), 0.01) == 1.0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25)
    def test_monotone_in_radius(self, seed):
        g = rng(seed)
        det = g.uniform(0, 0.5, size=(40, 3))
        trk = g.uniform(0, 0.5, size=(40, 3))
        a = geometric_overlap(PointCloud(det), PointCloud(trk), 0.02)
        b = geometric_overlap(PointCloud(det), PointCloud(trk), 0.05)
        c = geometric_overlap(PointCloud(det), PointCloud(trk), 0.2)
        assert a <= b <= c

    def test_radius_validation(self):
        with pytest.raises(GeometryInputError):
            geometric_overlap(PointCloud([(0, 0, 0)]), PointCloud([(0, 0, 0)]), 0.0)


# -- type invariants ----------------------------------------------------------

class TestTypes:
    def test_intrinsics_validation(self):
        with pytest.raises(GeometryInputError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(GeometryInputError):
            CameraIntrinsics(fx=1, fy=1, cx=10, cy=0, width=10, height=10)

    def test_pose_orthonormality_enforced(self):
        with pytest.raises(GeometryInputError):
            Pose(np.eye(3) * 2.0, np.zeros(3))
        reflection = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryInputError):
            Pose(reflection, np.zeros(3))

    def test_pointcloud_rejects_nonfinite(self):
        with pytest.raises(GeometryInputError):
            PointCloud([(0, 0, np.nan)])

    def test_depthmap_rejects_negative(self):
        with pytest.raises(GeometryInputError):
            DepthMap(np.full((4, 4), -1.0))

    def test_mask_bounds_checked(self):
        with pytest.raises(GeometryInputError):
            PixelMask(8, 8, [(8, 0)])

    def test_mask_dedupes_and_sorts(self):
        mask = PixelMask(8, 8, [(3, 2), (1, 1), (3, 2), (0, 2)])
        assert mask.pixels.tolist() == [[1, 1], [0, 2], [3, 2]]
