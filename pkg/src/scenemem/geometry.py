"""Depth-to-point-cloud geometry: back-projection, voxel downsampling,
density clustering and the point-overlap signal used by track association.

All functions here are pure and deterministic: given the same inputs they
produce the same outputs, including point ordering, so that downstream
serialization is byte-stable. Points are float64 world-frame coordinates
in meters. The camera model is the standard pinhole with x right, y down,
z forward; the world frame is z-up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-6


class GeometryInputError(ValueError):
    """Raised when an input violates an operation's contract."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryInputError("principal point outside image")
        if self.width <= 0 or self.height <= 0:
            raise GeometryInputError("image dimensions must be positive")


class Pose:
    """World-from-camera rigid transform.

    ``rotation`` is a 3x3 orthonormal matrix with determinant +1 (checked
    within 1e-6), ``translation`` the camera center in world meters.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        r = np.array(rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise GeometryInputError("pose must be finite")
        if np.max(np.abs(r @ r.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise GeometryInputError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise GeometryInputError("rotation determinant must be +1")
        r.flags.writeable = False
        t.flags.writeable = False
        self.rotation = r
        self.translation = t

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (n, 3) to world frame."""
        return points @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """World-frame points (n, 3) to camera frame."""
        return (points - self.translation) @ self.rotation

    def __repr__(self):
        return f"Pose(t={self.translation.tolist()})"


class PointCloud:
    """Immutable collection of world-frame points, shape (n, 3), meters."""

    __slots__ = ("points",)

    def __init__(self, points=None):
        if points is None:
            arr = np.empty((0, 3), dtype=np.float64)
        else:
            arr = np.array(points, dtype=np.float64)
            if arr.size == 0:
                arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise GeometryInputError("points must have shape (n, 3)")
        if not np.all(np.isfinite(arr)):
            raise GeometryInputError("points must be finite")
        arr.flags.writeable = False
        self.points = arr

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls()

    @property
    def is_empty(self) -> bool:
        return self.points.shape[0] == 0

    def __len__(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        if self.is_empty:
            raise GeometryInputError("centroid of empty cloud")
        return self.points.mean(axis=0)

    def extent(self) -> np.ndarray:
        """Axis-aligned extent (max - min) per axis."""
        if self.is_empty:
            raise GeometryInputError("extent of empty cloud")
        return self.points.max(axis=0) - self.points.min(axis=0)

    def union(self, other: "PointCloud") -> "PointCloud":
        if self.is_empty:
            return other
        if other.is_empty:
            return self
        return PointCloud(np.vstack([self.points, other.points]))

    def __repr__(self):
        return f"PointCloud(n={len(self)})"


class DepthMap:
    """Per-pixel depth in meters, indexed ``values[v, u]``. 0 = invalid."""

    __slots__ = ("values", "width", "height")

    def __init__(self, values, width: int | None = None, height: int | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2:
            raise GeometryInputError("depth map must be 2-D")
        h, w = arr.shape
        if width is not None and width != w:
            raise GeometryInputError("depth width does not match array")
        if height is not None and height != h:
            raise GeometryInputError("depth height does not match array")
        finite = arr[np.isfinite(arr)]
        if finite.size and finite.min() < 0:
            raise GeometryInputError("depth values must be >= 0")
        arr.flags.writeable = False
        self.values = arr
        self.width = w
        self.height = h

    @classmethod
    def from_millimeters(cls, mm: np.ndarray) -> "DepthMap":
        """Convert a uint16 millimeter image (0 = invalid) to meters."""
        return cls(np.asarray(mm, dtype=np.float64) / 1000.0)


class PixelMask:
    """Set of foreground pixels, stored as (u, v) pairs sorted by (v, u)."""

    __slots__ = ("width", "height", "pixels")

    def __init__(self, width: int, height: int, pixels):
        arr = np.array(list(pixels) if not isinstance(pixels, np.ndarray) else pixels,
                       dtype=np.int64)
        if arr.size == 0:
            arr = arr.reshape(0, 2)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise GeometryInputError("mask pixels must be (u, v) pairs")
        if arr.size:
            if arr.min() < 0 or arr[:, 0].max() >= width or arr[:, 1].max() >= height:
                raise GeometryInputError("mask pixel outside image bounds")
            arr = np.unique(arr, axis=0)
            arr = arr[np.lexsort((arr[:, 0], arr[:, 1]))]
        arr.flags.writeable = False
        self.width = width
        self.height = height
        self.pixels = arr

    @classmethod
    def from_bbox(cls, bbox, width: int, height: int) -> "PixelMask":
        """All pixels inside an inclusive (u_min, v_min, u_max, v_max) box."""
        u0, v0, u1, v1 = bbox
        us, vs = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        return cls(width, height, np.column_stack([us.ravel(), vs.ravel()]))

    @classmethod
    def from_runs(cls, runs, width: int, height: int) -> "PixelMask":
        """Build from row runs [(v, u_start, u_end)] with inclusive ends."""
        pix = []
        for v, u0, u1 in runs:
            for u in range(u0, u1 + 1):
                pix.append((u, v))
        return cls(width, height, pix)

    def __len__(self) -> int:
        return self.pixels.shape[0]


def backproject(depth: DepthMap, mask: PixelMask, intr: CameraIntrinsics,
                pose: Pose) -> PointCloud:
    """Lift masked depth pixels into a world-frame point cloud.

    Produces one point per masked pixel with a valid (> 0, finite) depth:
    the camera-frame point ((u-cx)*z/fx, (v-cy)*z/fy, z) transformed by
    ``pose``. Pixels with depth 0 or non-finite depth are skipped. Output
    order follows the mask's (v, u) pixel order.
    """
    if (depth.width, depth.height) != (intr.width, intr.height):
        raise GeometryInputError(
            f"depth {depth.width}x{depth.height} does not match intrinsics "
            f"{intr.width}x{intr.height}")
    if (mask.width, mask.height) != (intr.width, intr.height):
        raise GeometryInputError("mask dimensions do not match intrinsics")
    if len(mask) == 0:
        return PointCloud.empty()
    u = mask.pixels[:, 0]
    v = mask.pixels[:, 1]
    z = depth.values[v, u]
    valid = np.isfinite(z) & (z > 0)
    if not np.any(valid):
        return PointCloud.empty()
    u = u[valid].astype(np.float64)
    v = v[valid].astype(np.float64)
    z = z[valid]
    cam = np.column_stack([(u - intr.cx) * z / intr.fx,
                           (v - intr.cy) * z / intr.fy,
                           z])
    return PointCloud(pose.transform(cam))


def project(cloud: PointCloud, intr: CameraIntrinsics, pose: Pose,
            min_depth: float = 1e-9) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into the image; inverse of :func:`backproject`.

    Returns (u, v, z) arrays for points in front of the camera; points
    behind the camera are dropped. Coordinates are continuous (not rounded).
    """
    if cloud.is_empty:
        z = np.empty(0)
        return z, z.copy(), z.copy()
    cam = pose.inverse_transform(cloud.points)
    keep = cam[:, 2] > min_depth
    cam = cam[keep]
    u = cam[:, 0] / cam[:, 2] * intr.fx + intr.cx
    v = cam[:, 1] / cam[:, 2] * intr.fy + intr.cy
    return u, v, cam[:, 2]


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Collapse each occupied voxel cell to the centroid of its members.

    Cells are ``floor(p / voxel)`` per axis; output points are ordered by
    ascending lexicographic cell index, which makes the result independent
    of input order.
    """
    if voxel <= 0:
        raise GeometryInputError("voxel size must be positive")
    if cloud.is_empty:
        return PointCloud.empty()
    pts = cloud.points
    cells = np.floor(pts / voxel).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3), dtype=np.float64)
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    return PointCloud(sums / counts[:, None])


def _grid_buckets(points: np.ndarray, cell: float) -> dict[tuple[int, int, int], np.ndarray]:
    cells = np.floor(points / cell).astype(np.int64)
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    sorted_cells = cells[order]
    uniq, starts = np.unique(sorted_cells, axis=0, return_index=True)
    bounds = np.append(starts, len(order))
    return {(int(uniq[k, 0]), int(uniq[k, 1]), int(uniq[k, 2])):
            order[bounds[k]:bounds[k + 1]] for k in range(uniq.shape[0])}


def _neighbor_candidates(buckets, cell) -> np.ndarray:
    found = []
    cx, cy, cz = cell
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                hit = buckets.get((cx + dx, cy + dy, cz + dz))
                if hit is not None:
                    found.append(hit)
    if not found:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(found)


def _adjacency(pts: np.ndarray, eps: float) -> list[np.ndarray]:
    """Per-point arrays of neighbor indices within eps (inclusive of the
    point itself). Computed cell-batch-wise: each grid cell's members are
    tested against the 27 surrounding cells in one vectorized pass."""
    n = pts.shape[0]
    buckets = _grid_buckets(pts, eps)
    eps_sq = eps * eps
    neighbors: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n
    for cell, members in buckets.items():
        cand = _neighbor_candidates(buckets, cell)
        diff = pts[members][:, None, :] - pts[cand][None, :, :]
        within = (diff * diff).sum(axis=2) <= eps_sq
        for row, i in enumerate(members):
            neighbors[i] = cand[within[row]]
    return neighbors


def largest_cluster(cloud: PointCloud, eps: float, min_points: int) -> PointCloud:
    """Return the members of the most populous DBSCAN cluster.

    Standard DBSCAN over Euclidean distance: core points have at least
    ``min_points`` neighbors within eps (themselves included); clusters are
    the connected components of core points under the eps relation, plus
    border points. The result is input-order independent: a border point in
    reach of several clusters joins its lexicographically smallest core
    neighbor's cluster, and size ties between clusters favor the one whose
    lexicographically smallest member is smallest. Returns the empty cloud
    when no cluster forms; output points are sorted lexicographically.
    """
    if eps <= 0:
        raise GeometryInputError("eps must be positive")
    if min_points < 1:
        raise GeometryInputError("min_points must be >= 1")
    n = len(cloud)
    if n == 0:
        return PointCloud.empty()
    pts = cloud.points
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    neighbors = _adjacency(pts, eps)
    core = np.array([nb.size >= min_points for nb in neighbors])
    if not core.any():
        return PointCloud.empty()

    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for i in order:
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = next_label
        frontier = np.array([i], dtype=np.int64)
        while frontier.size:
            reached = np.unique(np.concatenate([neighbors[int(j)] for j in frontier]))
            fresh = reached[core[reached] & (labels[reached] == -1)]
            labels[fresh] = next_label
            frontier = fresh
        next_label += 1

    for i in np.flatnonzero(~core):
        core_nbrs = neighbors[i][core[neighbors[i]]]
        if core_nbrs.size:
            owner = core_nbrs[np.argmin(rank[core_nbrs])]
            labels[i] = labels[owner]

    sizes = np.bincount(labels[labels >= 0], minlength=next_label)
    best = -1
    best_key = None
    for lab in range(next_label):
        members = np.flatnonzero(labels == lab)
        smallest_rank = int(rank[members].min())
        key = (-int(sizes[lab]), smallest_rank)
        if best_key is None or key < best_key:
            best_key = key
            best = lab
    members = np.flatnonzero(labels == best)
    members = members[np.argsort(rank[members], kind="stable")]
    return PointCloud(pts[members])


def geometric_overlap(detection_cloud: PointCloud, track_cloud: PointCloud,
                      delta_g: float) -> float:
    """Fraction of detection points within ``delta_g`` of the track cloud.

    0.0 when the detection cloud is empty (degenerate detections never
    overlap). Uses a uniform grid over the track cloud with cell size
    ``delta_g``; results equal the brute-force all-pairs computation
    exactly because the same squared-distance comparison is evaluated for
    every candidate pair.
    """
    if delta_g <= 0:
        raise GeometryInputError("delta_g must be positive")
    n = len(detection_cloud)
    if n == 0:
        return 0.0
    if track_cloud.is_empty:
        return 0.0
    det = detection_cloud.points
    trk = track_cloud.points
    track_buckets = _grid_buckets(trk, delta_g)
    det_buckets = _grid_buckets(det, delta_g)
    thr = delta_g * delta_g
    inside = 0
    for cell, members in det_buckets.items():
        cand = _neighbor_candidates(track_buckets, cell)
        if cand.size == 0:
            continue
        diff = det[members][:, None, :] - trk[cand][None, :, :]
        hit = ((diff * diff).sum(axis=2) <= thr).any(axis=1)
        inside += int(hit.sum())
    return inside / n
