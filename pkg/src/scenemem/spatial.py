"""Floor/room structure and the per-frame navigation log.

Floors come from height-histogram modes, rooms from a watershed over the
wall distance transform, and every keyframe gets a navigation entry with
its room, a backend-produced field-of-view tag, an egocentric motion label
derived from pose deltas, and the ids of nodes seen in that frame.

The room/floor pipeline is deliberately coarse: the memory only needs
stable labels for indexing, not metrically exact floor plans. World frame
is z-up; all thresholds live in SpatialConfig.
"""

from __future__ import annotations

import heapq
import logging
import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .config import SpatialConfig
from .geometry import GeometryInputError, Pose

logger = logging.getLogger(__name__)

MOTION_LABELS = ("stationary", "forward", "backward", "turn_left",
                 "turn_right", "ascend", "descend")

_BIG = 1e18


@dataclass(frozen=True)
class FloorModel:
    """Ascending, non-overlapping height intervals covering all cameras."""

    floors: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        prev_hi = None
        for _, lo, hi in self.floors:
            if lo > hi:
                raise GeometryInputError("floor interval inverted")
            if prev_hi is not None and lo < prev_hi:
                raise GeometryInputError("floor intervals overlap")
            prev_hi = hi

    def floor_of(self, height: float) -> str:
        """Total assignment: heights outside all intervals clamp to the
        nearest floor."""
        if not self.floors:
            raise GeometryInputError("empty floor model")
        boundaries = [self.floors[i][2] for i in range(len(self.floors) - 1)]
        return self.floors[bisect_right(boundaries, height)][0]


@dataclass
class OccupancyGrid:
    """2-D free/wall grid for one floor. ``free[r, c]`` is True for free
    space; world (x, y) maps to cell (r, c) via origin and cell size."""

    free: np.ndarray
    origin: tuple[float, float]
    cell_size: float

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        c = int(math.floor((x - self.origin[0]) / self.cell_size))
        r = int(math.floor((y - self.origin[1]) / self.cell_size))
        return r, c

    def in_bounds(self, r: int, c: int) -> bool:
        return 0 <= r < self.free.shape[0] and 0 <= c < self.free.shape[1]


@dataclass
class RoomGrid:
    """Room assignment for one floor: ``room_ids[r, c]`` is a room index
    (>= 0) for free cells, -1 for walls/unassigned."""

    occupancy: OccupancyGrid
    room_ids: np.ndarray
    labels: dict[str, str] = field(default_factory=dict)  # room key -> label

    def room_keys(self) -> list[str]:
        ids = sorted({int(i) for i in np.unique(self.room_ids) if i >= 0})
        return [str(i) for i in ids]


@dataclass
class RoomModel:
    """Per-floor room grids; room ids are '<floor_id>/<index>'."""

    grids: dict[str, RoomGrid]

    def room_of(self, floor_id: str, x: float, y: float) -> str | None:
        grid = self.grids.get(floor_id)
        if grid is None:
            return None
        r, c = grid.occupancy.cell_of(x, y)
        if not grid.occupancy.in_bounds(r, c):
            return None
        idx = int(grid.room_ids[r, c])
        if idx < 0:
            return None
        return f"{floor_id}/{idx}"

    def room_of_nearest(self, floor_id: str, x: float, y: float,
                        max_radius_m: float = 0.5) -> str | None:
        """Like room_of, but a position on an unassigned cell (unseen
        ground, inside furniture) snaps to the nearest assigned cell within
        ``max_radius_m``."""
        direct = self.room_of(floor_id, x, y)
        if direct is not None:
            return direct
        grid = self.grids.get(floor_id)
        if grid is None:
            return None
        occ = grid.occupancy
        r0, c0 = occ.cell_of(x, y)
        max_cells = int(math.ceil(max_radius_m / occ.cell_size))
        best: tuple[float, int, int, int] | None = None
        for dr in range(-max_cells, max_cells + 1):
            for dc in range(-max_cells, max_cells + 1):
                r, c = r0 + dr, c0 + dc
                if not occ.in_bounds(r, c):
                    continue
                idx = int(grid.room_ids[r, c])
                if idx < 0:
                    continue
                d = math.hypot(dr, dc)
                if d * occ.cell_size > max_radius_m:
                    continue
                key = (d, r, c, idx)
                if best is None or key < best:
                    best = key
        if best is None:
            return None
        return f"{floor_id}/{best[3]}"

    def label_of(self, room_id: str | None) -> str:
        if room_id is None:
            return "unknown"
        floor_id, _, idx = room_id.rpartition("/")
        grid = self.grids.get(floor_id)
        if grid is None:
            return "unknown"
        return grid.labels.get(idx, "unknown")

    def room_ids(self) -> list[str]:
        out = []
        for floor_id in sorted(self.grids):
            out.extend(f"{floor_id}/{k}" for k in self.grids[floor_id].room_keys())
        return out


@dataclass
class NavLogEntry:
    frame_id: int
    room_label: str
    fov_tag: str
    motion_label: str
    visible_node_ids: list[int]

    def __post_init__(self):
        if self.motion_label not in MOTION_LABELS:
            raise GeometryInputError(f"unknown motion label '{self.motion_label}'")


def detect_floors(camera_heights: list[float], bin_size: float,
                  separation: float = 1.5) -> FloorModel:
    """Find floors as height-histogram modes.

    Bins of ``bin_size`` are scanned for local maxima; maxima closer than
    ``separation`` to an already accepted (taller) mode are suppressed.
    Floor boundaries sit midway between adjacent modes; the first and last
    floors extend to the extreme observed heights.
    """
    heights = np.asarray(list(camera_heights), dtype=np.float64)
    if heights.size == 0:
        raise GeometryInputError("camera_heights must be nonempty")
    if bin_size <= 0:
        raise GeometryInputError("bin size must be positive")
    lo = float(heights.min())
    hi = float(heights.max())
    nbins = max(1, int(math.floor((hi - lo) / bin_size)) + 1)
    idx = np.minimum(((heights - lo) / bin_size).astype(np.int64), nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    centers = lo + (np.arange(nbins) + 0.5) * bin_size
    order = sorted(range(nbins), key=lambda b: (-counts[b], b))
    modes: list[float] = []
    for b in order:
        if counts[b] == 0:
            break
        center = float(centers[b])
        if all(abs(center - m) >= separation for m in modes):
            modes.append(center)
    modes.sort()
    if len(modes) <= 1:
        return FloorModel((("floor0", lo, hi),))
    bounds = [(modes[i] + modes[i + 1]) / 2.0 for i in range(len(modes) - 1)]
    floors = []
    for i in range(len(modes)):
        f_lo = lo if i == 0 else bounds[i - 1]
        f_hi = hi if i == len(modes) - 1 else bounds[i]
        floors.append((f"floor{i}", f_lo, f_hi))
    return FloorModel(tuple(floors))


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Squared-distance transform of one row (lower-envelope parabolas)."""
    n = f.size
    d = np.empty(n, dtype=np.float64)
    v = np.zeros(n, dtype=np.int64)
    z = np.full(n + 1, 0.0)
    z[0] = -_BIG
    z[1] = _BIG
    k = 0
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _BIG
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def distance_transform(free: np.ndarray, cell_size: float) -> np.ndarray:
    """Exact Euclidean distance (meters) from each cell to the nearest
    wall cell. Walls get 0. Grids with no walls get a uniform large value."""
    free = np.asarray(free, dtype=bool)
    if not np.any(~free):
        return np.full(free.shape, _BIG, dtype=np.float64)
    g = np.where(free, _BIG, 0.0)
    g = np.apply_along_axis(_edt_1d, 0, g)
    g = np.apply_along_axis(_edt_1d, 1, g)
    return np.sqrt(g) * cell_size


_NEIGH8 = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                if (dr, dc) != (0, 0))
_NEIGH4 = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _pick_seeds(dist: np.ndarray, free: np.ndarray, cell_size: float,
                separation: float, min_dist: float) -> list[tuple[int, int]]:
    """Local maxima of the wall-distance field, greedily thinned to the
    required separation. Maxima shallower than ``min_dist`` never seed a
    room (unless nothing deeper exists)."""
    rows, cols = np.nonzero(free)
    candidates = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        d = dist[r, c]
        is_max = True
        for dr, dc in _NEIGH8:
            rr, cc = r + dr, c + dc
            if 0 <= rr < dist.shape[0] and 0 <= cc < dist.shape[1]:
                if free[rr, cc] and dist[rr, cc] > d:
                    is_max = False
                    break
        if is_max:
            candidates.append((-d, r, c))
    candidates.sort()
    seeds: list[tuple[int, int]] = []
    for neg_d, r, c in candidates:
        if seeds and -neg_d < min_dist:
            break  # only shallow maxima remain
        ok = True
        for sr, sc in seeds:
            if math.hypot(r - sr, c - sc) * cell_size < separation:
                ok = False
                break
        if ok:
            seeds.append((r, c))
    return seeds


def segment_rooms(occupancy: dict[str, OccupancyGrid],
                  cfg: SpatialConfig | None = None) -> RoomModel:
    """Partition each floor's free space into rooms.

    Distance transform from walls, seeds at its local maxima (suppressed
    below ``room_peak_separation_m``), then priority-flood watershed: cells
    are labeled in order of decreasing wall distance, each taking the label
    of the already-labeled neighbor that reached it first. Free pockets no
    seed reaches get their own room so the partition is total. Labels are
    left unset (see :func:`label_rooms`).
    """
    cfg = cfg or SpatialConfig()
    grids: dict[str, RoomGrid] = {}
    for floor_id in sorted(occupancy):
        occ = occupancy[floor_id]
        free = np.asarray(occ.free, dtype=bool)
        room_ids = np.full(free.shape, -1, dtype=np.int64)
        if not np.any(free):
            grids[floor_id] = RoomGrid(occ, room_ids)
            continue
        dist = distance_transform(free, occ.cell_size)
        seeds = _pick_seeds(dist, free, occ.cell_size, cfg.room_peak_separation_m,
                            cfg.room_seed_min_dist_m)
        counter = 0
        heap: list[tuple[float, int, int, int, int]] = []
        for label, (r, c) in enumerate(seeds):
            room_ids[r, c] = label
            heapq.heappush(heap, (-dist[r, c], counter, r, c, label))
            counter += 1
        next_label = len(seeds)
        while True:
            while heap:
                _, _, r, c, label = heapq.heappop(heap)
                for dr, dc in _NEIGH4:
                    rr, cc = r + dr, c + dc
                    if (0 <= rr < free.shape[0] and 0 <= cc < free.shape[1]
                            and free[rr, cc] and room_ids[rr, cc] < 0):
                        room_ids[rr, cc] = label
                        heapq.heappush(heap, (-dist[rr, cc], counter, rr, cc, label))
                        counter += 1
            unlabeled = free & (room_ids < 0)
            if not np.any(unlabeled):
                break
            # isolated pocket: seed it at its deepest cell
            rows, cols = np.nonzero(unlabeled)
            best = max(range(rows.size),
                       key=lambda i: (dist[rows[i], cols[i]], -rows[i], -cols[i]))
            r, c = int(rows[best]), int(cols[best])
            room_ids[r, c] = next_label
            heapq.heappush(heap, (-dist[r, c], counter, r, c, next_label))
            counter += 1
            next_label += 1
        grids[floor_id] = RoomGrid(occ, room_ids)
    return RoomModel(grids)


def label_rooms(model: RoomModel, members: dict[str, list[str]], backend,
                class_list: list[str]) -> RoomModel:
    """Assign a semantic label to each room.

    ``members`` maps room id to the captions of tracks inside it. The
    backend scores the captions against ``class_list``; the argmax class
    wins, ties broken by class order. Rooms with no members, and rooms
    whose scoring call fails, are labeled "unknown".
    """
    from .backend import BackendError, BackendRequest

    if not class_list:
        raise GeometryInputError("class_list must be nonempty")
    for room_id in model.room_ids():
        floor_id, _, idx = room_id.rpartition("/")
        captions = members.get(room_id, [])
        label = "unknown"
        if captions:
            request = BackendRequest(kind="room_label",
                                     payload={"captions": sorted(captions),
                                              "classes": list(class_list)})
            try:
                response = backend.call(request)
                scores = response.scores
                if len(scores) != len(class_list):
                    raise BackendError("score count does not match class list")
                best = max(range(len(class_list)), key=lambda i: (scores[i], -i))
                label = class_list[best]
            except BackendError as exc:
                logger.warning("room labeling failed for %s: %s", room_id, exc)
                label = "unknown"
        model.grids[floor_id].labels[idx] = label
    return model


def _heading(pose: Pose) -> float | None:
    fwd = pose.rotation[:, 2]
    if math.hypot(fwd[0], fwd[1]) < 1e-9:
        return None  # looking straight up/down: yaw undefined
    return math.atan2(fwd[1], fwd[0])


def motion_label(prev: Pose, curr: Pose, cfg: SpatialConfig | None = None) -> str:
    """Egocentric motion between consecutive poses.

    Precedence: yaw beyond the threshold wins (positive yaw = left turn),
    then forward/backward translation along prev's optical axis, then
    vertical world displacement, else stationary.
    """
    cfg = cfg or SpatialConfig()
    h_prev = _heading(prev)
    h_curr = _heading(curr)
    if h_prev is not None and h_curr is not None:
        dyaw = math.atan2(math.sin(h_curr - h_prev), math.cos(h_curr - h_prev))
        if abs(dyaw) > math.radians(cfg.yaw_threshold_deg):
            return "turn_left" if dyaw > 0 else "turn_right"
    t_rel = prev.rotation.T @ (curr.translation - prev.translation)
    if abs(t_rel[2]) > cfg.forward_threshold_m:
        return "forward" if t_rel[2] > 0 else "backward"
    dz = curr.translation[2] - prev.translation[2]
    if abs(dz) > cfg.vertical_threshold_m:
        return "ascend" if dz > 0 else "descend"
    return "stationary"


def build_nav_entry(frame, prev, rooms: RoomModel | None, floors: FloorModel | None,
                    visible: set[int] | list[int], backend,
                    cfg: SpatialConfig | None = None) -> NavLogEntry:
    """Assemble one navigation-log entry for a processed keyframe.

    ``frame``/``prev`` are keyframes (prev None for the first frame). The
    room label comes from the camera position lookup, the field-of-view tag
    from the backend (or "unavailable" on failure).
    """
    from .backend import BackendError, BackendRequest

    cfg = cfg or SpatialConfig()
    cam = frame.pose.translation
    room_label = "unknown"
    if floors is not None and rooms is not None:
        floor_id = floors.floor_of(float(cam[2]))
        room_id = rooms.room_of_nearest(floor_id, float(cam[0]), float(cam[1]))
        room_label = rooms.label_of(room_id)
    motion = "stationary" if prev is None else motion_label(prev.pose, frame.pose, cfg)
    try:
        response = backend.call(BackendRequest(kind="fov", frame_id=frame.id))
        fov_tag = response.tag
    except BackendError as exc:
        logger.warning("fov tag unavailable for frame %d: %s", frame.id, exc)
        fov_tag = "unavailable"
    return NavLogEntry(frame_id=frame.id, room_label=room_label, fov_tag=fov_tag,
                       motion_label=motion,
                       visible_node_ids=sorted(set(int(i) for i in visible)))
