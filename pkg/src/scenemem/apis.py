"""The language-callable memory-edit APIs and patch integration.

find_objects, analyze_objects and analyze_frame each take a frame id and a
natural-language query, consult the backend, and return a Patch: new
detections (already lifted through the geometry pipeline), new relation
edges, scratchpad notes and evidence pointers. Nothing touches the memory
until apply_patch integrates the whole patch atomically; a failure anywhere
mid-application leaves the memory exactly as it was.

Notes inside a patch may target an existing node or a detection within the
same patch ("pending"); pending notes attach to whichever track the
detection lands in (merge target or newly created node).

retrieve_frame is the degenerate fourth action used by the image-only API
mode: an empty patch whose only effect is appending the frame to the frame
memory.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .backend import (AnalyzeResponse, Backend, BackendError, BackendRequest,
                      WireObject)
from .config import EngineConfig
from .dataset import DatasetError, Episode, Keyframe
from .geometry import (PixelMask, backproject, largest_cluster, project,
                       voxel_downsample)
from .graph import (Detection, Embedding, RelationEdge, Track, associate,
                    caption_embedding, hash_embedding, merge_detection)
from .memory import SceneMemory, append_frame

logger = logging.getLogger(__name__)

API_KINDS = ("find_objects", "analyze_objects", "analyze_frame", "retrieve_frame")


class ApiError(ValueError):
    pass


@dataclass(frozen=True)
class ApiCall:
    kind: str
    frame_id: int
    query: str
    node_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in API_KINDS:
            raise ApiError(f"unknown api kind '{self.kind}'")
        if self.kind != "retrieve_frame" and not self.query.strip():
            raise ApiError("query must be nonempty")
        if (self.node_ids is not None) != (self.kind == "analyze_objects"):
            raise ApiError("node_ids must be given exactly for analyze_objects")
        if self.kind == "analyze_objects" and not self.node_ids:
            raise ApiError("analyze_objects requires at least one node id")

    def to_doc(self) -> dict:
        doc = {"api": self.kind, "frame_id": self.frame_id, "query": self.query}
        if self.node_ids is not None:
            doc["node_ids"] = list(self.node_ids)
        return doc


@dataclass(frozen=True)
class PatchNote:
    target_kind: str  # "node" | "pending"
    target: int       # node id, or index into the patch's detections
    text: str

    def __post_init__(self):
        if self.target_kind not in ("node", "pending"):
            raise ApiError(f"bad note target kind '{self.target_kind}'")


@dataclass
class Patch:
    provenance: ApiCall
    new_detections: list[Detection] = field(default_factory=list)
    new_edges: list[RelationEdge] = field(default_factory=list)
    notes: list[PatchNote] = field(default_factory=list)
    evidence: list[tuple[int, tuple[int, int, int, int]]] = field(default_factory=list)
    skipped_nodes: list[int] = field(default_factory=list)
    failure: str | None = None

    @property
    def is_empty(self) -> bool:
        return not (self.new_detections or self.new_edges or self.notes)

    def to_doc(self) -> dict:
        """Loggable form; render with memory.canonical_json for stable
        record/replay artifacts (clouds appear as summaries)."""
        from .graph import CloudSummary

        dets = []
        for d in self.new_detections:
            summary = CloudSummary.of(d.cloud)
            dets.append({"frame_id": d.frame_id, "bbox": list(d.bbox),
                         "caption": d.caption,
                         "cloud": None if summary is None else
                         {"centroid": [float(x) for x in summary.centroid],
                          "extent": [float(x) for x in summary.extent],
                          "points": summary.count}})
        return {
            "provenance": self.provenance.to_doc(),
            "new_detections": dets,
            "new_edges": [{"subject_id": e.subject_id, "object_id": e.object_id,
                           "relation": e.relation,
                           "justification": e.justification,
                           "source_frame": e.source_frame}
                          for e in self.new_edges],
            "notes": [{"target_kind": n.target_kind, "target": n.target,
                       "text": n.text} for n in self.notes],
            "evidence": [[fid, list(bbox)] for fid, bbox in self.evidence],
            "skipped_nodes": list(self.skipped_nodes),
            "failure": self.failure,
        }

    def validate(self, live_nodes: set[int]) -> None:
        for note in self.notes:
            if note.target_kind == "pending":
                if not 0 <= note.target < len(self.new_detections):
                    raise ApiError(f"pending note index {note.target} out of range")
            elif note.target not in live_nodes:
                raise ApiError(f"note targets unknown node {note.target}")
        if not self.is_empty and not self.evidence:
            raise ApiError("nonempty patch must carry evidence pointers")


@dataclass
class PatchReport:
    call: ApiCall
    created: list[int] = field(default_factory=list)
    merged: list[tuple[int, int]] = field(default_factory=list)  # (det idx, track id)
    edges_accepted: int = 0
    edges_rejected: list[str] = field(default_factory=list)
    notes_added: int = 0
    frame_appended: bool = False
    failure: str | None = None

    def to_doc(self) -> dict:
        return {"api": self.call.kind, "frame_id": self.call.frame_id,
                "query": self.call.query, "created": list(self.created),
                "merged": [list(m) for m in self.merged],
                "edges_accepted": self.edges_accepted,
                "edges_rejected": list(self.edges_rejected),
                "notes_added": self.notes_added,
                "frame_appended": self.frame_appended,
                "failure": self.failure}


class ApiExecutor:
    """Executes API calls against one episode. Holds the frame source, the
    backend and the engine configuration; produces patches but never
    mutates a memory itself."""

    def __init__(self, episode: Episode, backend: Backend, config: EngineConfig):
        self.episode = episode
        self.backend = backend
        self.config = config

    # -- geometry + embedding lift ---------------------------------------

    def _mask_for(self, wire: WireObject, frame: Keyframe) -> PixelMask:
        w, h = frame.intrinsics.width, frame.intrinsics.height
        if wire.mask_runs is not None:
            return PixelMask.from_runs(wire.mask_runs, w, h)
        return PixelMask.from_bbox(wire.bbox, w, h)

    def _embedding(self, values, kind: str, caption: str) -> Embedding:
        if values is not None:
            return Embedding(values, kind)
        if kind == "language":
            return caption_embedding(caption, self.config.embedding_dim)
        return hash_embedding("visual-fallback:" + caption, "visual",
                              self.config.embedding_dim)

    def detection_from_wire(self, wire: WireObject, frame: Keyframe) -> Detection:
        """Back-project the masked depth, downsample, keep the densest
        cluster, attach embeddings."""
        geo = self.config.geometry
        cloud = backproject(frame.depth, self._mask_for(wire, frame),
                            frame.intrinsics, frame.pose)
        if not cloud.is_empty:
            cloud = voxel_downsample(cloud, geo.voxel_size_m)
            cloud = largest_cluster(cloud, geo.cluster_eps_m, geo.cluster_min_points)
        return Detection(frame_id=frame.id, bbox=wire.bbox, caption=wire.caption,
                         cloud=cloud,
                         visual=self._embedding(wire.visual_embedding, "visual",
                                                wire.caption),
                         language=self._embedding(wire.language_embedding, "language",
                                                  wire.caption))

    def _projected_bbox(self, track: Track, frame: Keyframe) -> tuple[int, int, int, int] | None:
        if track.cloud is None or track.cloud.is_empty:
            return None
        u, v, _ = project(track.cloud, frame.intrinsics, frame.pose)
        if u.size == 0:
            return None
        w, h = frame.intrinsics.width, frame.intrinsics.height
        inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        if not inside.any():
            return None
        u, v = u[inside], v[inside]
        return (int(u.min()), int(v.min()),
                min(int(u.max()), w - 1), min(int(v.max()), h - 1))

    def _visible_targets(self, ssm: SceneMemory, frame: Keyframe,
                         only: tuple[int, ...] | None = None) -> list[dict]:
        """(node_id, bbox, caption) docs for tracks visible in the frame."""
        targets = []
        ids = only if only is not None else sorted(ssm.graph.tracks)
        for nid in ids:
            track = ssm.graph.tracks.get(nid)
            if track is None or frame.id not in track.visible_frames:
                continue
            bbox = self._projected_bbox(track, frame)
            if bbox is None:
                bbox = (0, 0, frame.intrinsics.width - 1, frame.intrinsics.height - 1)
            targets.append({"node_id": nid, "bbox": list(bbox),
                            "caption": track.caption})
        return targets

    # -- the three APIs ---------------------------------------------------

    def execute(self, call: ApiCall, ssm: SceneMemory) -> Patch:
        try:
            self.episode.frame(call.frame_id)
        except DatasetError as exc:
            return Patch(provenance=call, failure=str(exc))
        if call.kind == "find_objects":
            return self.find_objects(call, ssm)
        if call.kind == "analyze_objects":
            return self.analyze_objects(call, ssm)
        if call.kind == "analyze_frame":
            return self.analyze_frame(call, ssm)
        return Patch(provenance=call)  # retrieve_frame: frame append only

    def find_objects(self, call: ApiCall, ssm: SceneMemory) -> Patch:
        """Detect query-relevant instances in the frame and package them
        (plus the backend's query-relevant notes) as a patch."""
        frame = self.episode.frame(call.frame_id)
        request = BackendRequest(kind="detect", frame_id=call.frame_id,
                                 query=call.query)
        try:
            response = self.backend.call(request)
        except BackendError as exc:
            logger.warning("find_objects backend failure: %s", exc)
            return Patch(provenance=call, failure=str(exc))
        patch = Patch(provenance=call)
        for wire in response.objects:
            idx = len(patch.new_detections)
            patch.new_detections.append(self.detection_from_wire(wire, frame))
            patch.evidence.append((call.frame_id, wire.bbox))
            if wire.note:
                patch.notes.append(PatchNote("pending", idx, wire.note))
        return patch

    def analyze_objects(self, call: ApiCall, ssm: SceneMemory) -> Patch:
        """Annotate the listed nodes that are visible in the frame; when
        none are, behave exactly as find_objects on the same call."""
        frame = self.episode.frame(call.frame_id)
        known: list[int] = []
        skipped: list[int] = []
        for nid in call.node_ids or ():
            if nid in ssm.graph.tracks:
                known.append(nid)
            else:
                skipped.append(nid)
        if skipped:
            logger.warning("analyze_objects: skipping unknown node ids %s", skipped)
        targets = self._visible_targets(ssm, frame, tuple(known))
        if not targets:
            fallback = self.find_objects(
                ApiCall("find_objects", call.frame_id, call.query), ssm)
            fallback.provenance = call
            fallback.skipped_nodes = skipped
            return fallback
        request = BackendRequest(kind="analyze", frame_id=call.frame_id,
                                 query=call.query,
                                 payload={"targets": targets, "discover": False})
        try:
            response = self.backend.call(request)
        except BackendError as exc:
            logger.warning("analyze_objects backend failure: %s", exc)
            return Patch(provenance=call, failure=str(exc), skipped_nodes=skipped)
        patch = Patch(provenance=call, skipped_nodes=skipped)
        bbox_by_id = {t["node_id"]: tuple(t["bbox"]) for t in targets}
        self._absorb_analysis(patch, response, frame, call,
                              allowed_nodes=set(bbox_by_id), bboxes=bbox_by_id,
                              allow_new=False)
        return patch

    def analyze_frame(self, call: ApiCall, ssm: SceneMemory) -> Patch:
        """Jointly discover unseen objects and annotate known ones in one
        backend call."""
        frame = self.episode.frame(call.frame_id)
        targets = self._visible_targets(ssm, frame)
        request = BackendRequest(kind="analyze", frame_id=call.frame_id,
                                 query=call.query,
                                 payload={"targets": targets, "discover": True})
        try:
            response = self.backend.call(request)
        except BackendError as exc:
            logger.warning("analyze_frame backend failure: %s", exc)
            return Patch(provenance=call, failure=str(exc))
        patch = Patch(provenance=call)
        bbox_by_id = {t["node_id"]: tuple(t["bbox"]) for t in targets}
        self._absorb_analysis(patch, response, frame, call,
                              allowed_nodes=set(ssm.graph.tracks), bboxes=bbox_by_id,
                              allow_new=True)
        return patch

    def _absorb_analysis(self, patch: Patch, response: AnalyzeResponse,
                         frame: Keyframe, call: ApiCall, allowed_nodes: set[int],
                         bboxes: dict[int, tuple[int, int, int, int]],
                         allow_new: bool) -> None:
        if allow_new:
            for wire in response.new_objects:
                idx = len(patch.new_detections)
                patch.new_detections.append(self.detection_from_wire(wire, frame))
                patch.evidence.append((call.frame_id, wire.bbox))
                if wire.note:
                    patch.notes.append(PatchNote("pending", idx, wire.note))
        for nid, text in response.notes:
            if nid not in allowed_nodes:
                patch.skipped_nodes.append(nid)
                continue
            patch.notes.append(PatchNote("node", nid, text))
            bbox = bboxes.get(nid, (0, 0, frame.intrinsics.width - 1,
                                    frame.intrinsics.height - 1))
            patch.evidence.append((call.frame_id, bbox))


# ---------------------------------------------------------------------------
# Patch integration
# ---------------------------------------------------------------------------

def _associate_detections(work: SceneMemory, patch: Patch, cfg: EngineConfig,
                          report: PatchReport) -> dict[int, int]:
    """Merge or create a track per patch detection; returns detection
    index -> landing track id."""
    tracks = [work.graph.tracks[tid] for tid in sorted(work.graph.tracks)]
    matching = associate(patch.new_detections, tracks, cfg.association)
    landing: dict[int, int] = {}
    for di, det in enumerate(patch.new_detections):
        target = matching[di]
        if target is None:
            track = Track(id=work.graph.new_track_id(), cloud=det.cloud,
                          visual=det.visual, language=det.language,
                          caption=det.caption, caption_history=[det.caption],
                          visible_frames=[det.frame_id])
            if work.floors is not None and work.rooms is not None \
                    and not det.cloud.is_empty:
                cx, cy, cz = det.cloud.centroid()
                floor_id = work.floors.floor_of(float(cz))
                track.floor_id = floor_id
                track.room_id = work.rooms.room_of(floor_id, float(cx), float(cy))
                if track.room_id is not None:
                    track.room_label = work.rooms.label_of(track.room_id)
            work.create_track(track)
            report.created.append(track.id)
            landing[di] = track.id
        else:
            merged = merge_detection(work.graph.tracks[target], det,
                                     cfg.association, cfg.geometry.voxel_size_m)
            work.graph.replace_track(merged)
            report.merged.append((di, target))
            landing[di] = target
    return landing


def _insert_edges(work: SceneMemory, patch: Patch, report: PatchReport) -> None:
    edge_report = work.graph.add_edges(patch.new_edges)
    report.edges_accepted = len(edge_report.accepted)
    report.edges_rejected = [reason for _, reason in edge_report.rejected]


def _append_notes(work: SceneMemory, patch: Patch, landing: dict[int, int],
                  report: PatchReport) -> None:
    for note in patch.notes:
        node_id = landing[note.target] if note.target_kind == "pending" else note.target
        work.add_note(node_id, note.text, patch.provenance.kind,
                      patch.provenance.query, patch.provenance.frame_id)
        report.notes_added += 1


def _append_frame_memory(work: SceneMemory, patch: Patch,
                         report: PatchReport) -> None:
    before = len(work.frame_memory)
    work.frame_memory = append_frame(work.frame_memory, patch.provenance.frame_id)
    report.frame_appended = len(work.frame_memory) > before


def _update_nav_log(work: SceneMemory, patch: Patch,
                    landing: dict[int, int]) -> None:
    if not landing:
        return
    fid = patch.provenance.frame_id
    for i, entry in enumerate(work.nav_log):
        if entry.frame_id == fid:
            merged_ids = sorted(set(entry.visible_node_ids) | set(landing.values()))
            work.nav_log[i] = replace(entry, visible_node_ids=merged_ids)
            return


def apply_patch(ssm: SceneMemory, patch: Patch,
                cfg: EngineConfig | None = None) -> tuple[SceneMemory, PatchReport]:
    """Integrate a patch atomically.

    In order: (1) detections associate against current tracks (merge at
    >= min_votes votes, else new track with its scratchpad entry),
    (2) edges validated and inserted, (3) notes resolved and appended,
    (4) the patched frame enters frame memory, (5) the frame's nav-log
    entry gains the landed node ids. Either every effect lands or — on any
    internal failure — the input memory is returned untouched with the
    failure recorded in the report.
    """
    cfg = cfg or EngineConfig()
    report = PatchReport(call=patch.provenance)
    if patch.failure is not None:
        report.failure = patch.failure
        return ssm, report
    if patch.provenance.frame_id not in set(ssm.frame_ids):
        report.failure = f"frame {patch.provenance.frame_id} not in episode"
        return ssm, report
    work = ssm.copy()
    try:
        patch.validate(set(work.graph.tracks))
        landing = _associate_detections(work, patch, cfg, report)
        _insert_edges(work, patch, report)
        _append_notes(work, patch, landing, report)
        _append_frame_memory(work, patch, report)
        _update_nav_log(work, patch, landing)
        work.validate()
    except Exception as exc:  # atomicity: discard the working copy entirely
        logger.warning("apply_patch failed, memory unchanged: %s", exc)
        return ssm, PatchReport(call=patch.provenance, failure=str(exc))
    return work, report
