"""The scene memory: the four linked structures handed to the reasoner.

A SceneMemory bundles the scene graph, the per-node scratchpad, the frame
memory and the navigation log, plus episode metadata. It serializes to a
canonical JSON form: object keys sorted, arrays in id order, floats
rendered with exactly 4 decimal places, point clouds summarized as
(centroid, axis-aligned extent, point count). Equal memories produce
byte-identical text, which is what golden-file tests and the record/replay
harness rely on.

Frame memory is not part of the JSON body; it is returned alongside as an
ordered list of (frame id, image locator) references, mirroring how frames
are supplied to the reasoner as interleaved images. For persistence the
frame memory rides inside the "episode" object so a round trip restores it.

Embeddings never appear in the JSON (prompts need text, not vectors); they
live in a side-car binary file, as do raw point clouds. See save_dir /
load_dir.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .graph import (CloudSummary, Embedding, GraphError, RelationEdge, SceneGraph,
                    Track)
from .spatial import MOTION_LABELS, FloorModel, NavLogEntry, RoomModel

SOURCE_APIS = ("find_objects", "analyze_objects", "analyze_frame")


class MemoryError_(ValueError):
    """Input-contract violation against the memory structures."""


class SerializationError(ValueError):
    """Memory invariants do not hold; refuse to serialize."""


class ParseError(ValueError):
    """Serialized text violates the schema; ``path`` names the offender."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class Note:
    text: str
    source_api: str
    query: str
    evidence_frame: int

    def __post_init__(self):
        if self.source_api not in SOURCE_APIS:
            raise MemoryError_(f"unknown source api '{self.source_api}'")


@dataclass
class ScratchpadEntry:
    node_id: int
    notes: list[Note] = field(default_factory=list)


@dataclass
class FrameMemory:
    """Ordered, duplicate-free set of keyframe ids available to the
    reasoner. Starts as the evenly spaced initial selection and only ever
    grows (no eviction)."""

    frames: list[int]
    initial_count: int
    episode_ids: frozenset[int]

    def __post_init__(self):
        if len(set(self.frames)) != len(self.frames):
            raise MemoryError_("frame memory contains duplicates")
        unknown = [f for f in self.frames if f not in self.episode_ids]
        if unknown:
            raise MemoryError_(f"frame {unknown[0]} not part of the episode")

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self.frames

    def __len__(self) -> int:
        return len(self.frames)

    def copy(self) -> "FrameMemory":
        return FrameMemory(list(self.frames), self.initial_count, self.episode_ids)


def init_frame_memory(episode_frame_ids: list[int], n_img: int) -> FrameMemory:
    """Select ``n_img`` evenly spaced keyframes.

    Index i of n maps to round(i * (N - 1) / (n - 1)); a single requested
    frame takes the middle one; duplicates collapse when the episode is
    shorter than the request. Rounding is half-up for platform stability.
    """
    ids = list(episode_frame_ids)
    if not ids:
        raise MemoryError_("episode has no frames")
    if n_img < 1:
        raise MemoryError_("n_img must be >= 1")
    n = len(ids)
    if n_img == 1:
        picks = [int((n - 1) / 2 + 0.5)]
    else:
        picks = [int(i * (n - 1) / (n_img - 1) + 0.5) for i in range(n_img)]
    chosen: list[int] = []
    for p in picks:
        fid = ids[min(p, n - 1)]
        if fid not in chosen:
            chosen.append(fid)
    return FrameMemory(chosen, n_img, frozenset(ids))


def append_frame(fm: FrameMemory, frame_id: int) -> FrameMemory:
    """Grow the frame memory by one id (no-op when already present)."""
    if frame_id not in fm.episode_ids:
        raise MemoryError_(f"frame {frame_id} not part of the episode")
    if frame_id in fm.frames:
        return fm
    return FrameMemory(fm.frames + [frame_id], fm.initial_count, fm.episode_ids)


@dataclass
class SceneMemory:
    """Single-writer memory of one scene episode.

    ``floors``/``rooms`` are construction-time models kept for patch-time
    room lookup; they are transient (not serialized).
    """

    graph: SceneGraph
    scratchpad: dict[int, ScratchpadEntry]
    frame_memory: FrameMemory
    nav_log: list[NavLogEntry]
    scene_id: str
    stride: int
    frame_ids: list[int]
    frame_locators: dict[int, str]
    floors: FloorModel | None = None
    rooms: RoomModel | None = None

    @classmethod
    def empty(cls, scene_id: str, stride: int, frame_ids: list[int],
              frame_locators: dict[int, str] | None = None) -> "SceneMemory":
        locators = dict(frame_locators or {})
        for fid in frame_ids:
            locators.setdefault(fid, f"frame://{scene_id}/{fid}")
        fm = FrameMemory([], 0, frozenset(frame_ids))
        return cls(graph=SceneGraph(), scratchpad={}, frame_memory=fm,
                   nav_log=[], scene_id=scene_id, stride=stride,
                   frame_ids=list(frame_ids), frame_locators=locators)

    # -- mutation helpers (keep graph and scratchpad in lockstep) --

    def create_track(self, track: Track) -> Track:
        """Insert a track and its scratchpad entry atomically."""
        self.graph.insert_track(track)
        self.scratchpad[track.id] = ScratchpadEntry(node_id=track.id)
        return track

    def add_note(self, node_id: int, text: str, source_api: str, query: str,
                 evidence_frame: int) -> None:
        """Append one provenance-carrying note; notes are append-only."""
        if node_id not in self.scratchpad:
            raise MemoryError_(f"unknown node id {node_id}")
        self.scratchpad[node_id].notes.append(
            Note(text=text, source_api=source_api, query=query,
                 evidence_frame=evidence_frame))

    def note_count(self) -> int:
        return sum(len(e.notes) for e in self.scratchpad.values())

    def validate(self) -> None:
        """Raise SerializationError when a cross-structure invariant is
        broken."""
        if set(self.scratchpad) != set(self.graph.tracks):
            raise SerializationError("scratchpad node set differs from graph node set")
        live = set(self.graph.tracks)
        for e in self.graph.edges:
            if e.subject_id not in live or e.object_id not in live:
                raise SerializationError(f"edge references dead track: {e.key()}")
        episode = set(self.frame_ids)
        for f in self.frame_memory.frames:
            if f not in episode:
                raise SerializationError(f"frame memory id {f} outside episode")
        nav_ids = [e.frame_id for e in self.nav_log]
        if nav_ids != list(self.frame_ids):
            raise SerializationError("navigation log does not cover the episode keyframes")
        for entry in self.nav_log:
            for nid in entry.visible_node_ids:
                if nid not in live:
                    raise SerializationError(
                        f"nav entry {entry.frame_id} cites dead node {nid}")

    def copy(self) -> "SceneMemory":
        return SceneMemory(
            graph=self.graph.copy(),
            scratchpad={nid: ScratchpadEntry(nid, list(e.notes))
                        for nid, e in self.scratchpad.items()},
            frame_memory=self.frame_memory.copy(),
            nav_log=[replace(e, visible_node_ids=list(e.visible_node_ids))
                     for e in self.nav_log],
            scene_id=self.scene_id,
            stride=self.stride,
            frame_ids=list(self.frame_ids),
            frame_locators=dict(self.frame_locators),
            floors=self.floors,
            rooms=self.rooms,
        )


# ---------------------------------------------------------------------------
# Canonical JSON
# ---------------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    if not np.isfinite(x):
        raise SerializationError(f"non-finite float {x!r}")
    s = f"{x:.4f}"
    return "0.0000" if s == "-0.0000" else s


def _canon(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(_fmt_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise SerializationError("object keys must be strings")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=False))
            out.append(":")
            _canon(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _canon(item, out)
        out.append("]")
    else:
        raise SerializationError(f"unserializable value of type {type(obj).__name__}")


def canonical_json(obj) -> str:
    out: list[str] = []
    _canon(obj, out)
    return "".join(out)


def _track_doc(t: Track) -> dict:
    summary = t.cloud_summary()
    cloud = None
    if summary is not None:
        cloud = {"centroid": [float(x) for x in summary.centroid],
                 "extent": [float(x) for x in summary.extent],
                 "points": summary.count}
    return {
        "id": t.id,
        "caption": t.caption,
        "caption_history": list(t.caption_history),
        "room_id": t.room_id,
        "room_label": t.room_label,
        "floor_id": t.floor_id,
        "visible_frames": list(t.visible_frames),
        "cloud": cloud,
    }


def serialize(ssm: SceneMemory) -> tuple[str, list[tuple[int, str]]]:
    """Render the memory to canonical JSON plus frame references.

    Returns (text, refs): the JSON document with top-level keys
    scene_graph / scratchpad / navigation_log / episode, and the frame
    references as (frame id, image locator) pairs in frame-memory order.
    Refuses to serialize when cross-structure invariants fail.
    """
    ssm.validate()
    tracks = [_track_doc(ssm.graph.tracks[tid]) for tid in sorted(ssm.graph.tracks)]
    edges = sorted(ssm.graph.edges,
                   key=lambda e: (e.subject_id, e.object_id, e.relation, e.source_frame))
    edge_docs = [{"subject_id": e.subject_id, "object_id": e.object_id,
                  "relation": e.relation, "justification": e.justification,
                  "source_frame": e.source_frame} for e in edges]
    pad = [{"node_id": nid,
            "notes": [{"text": n.text, "source_api": n.source_api,
                       "query": n.query, "evidence_frame": n.evidence_frame}
                      for n in ssm.scratchpad[nid].notes]}
           for nid in sorted(ssm.scratchpad)]
    nav = [{"frame_id": e.frame_id, "room_label": e.room_label,
            "fov_tag": e.fov_tag, "motion_label": e.motion_label,
            "visible_node_ids": sorted(e.visible_node_ids)}
           for e in ssm.nav_log]
    doc = {
        "episode": {
            "scene_id": ssm.scene_id,
            "stride": ssm.stride,
            "frame_count": len(ssm.frame_ids),
            "frame_ids": list(ssm.frame_ids),
            "frame_locators": {str(fid): loc
                               for fid, loc in sorted(ssm.frame_locators.items())},
            "frame_memory": {"frames": list(ssm.frame_memory.frames),
                             "initial_count": ssm.frame_memory.initial_count},
        },
        "scene_graph": {"tracks": tracks, "edges": edge_docs},
        "scratchpad": pad,
        "navigation_log": nav,
    }
    refs = [(fid, ssm.frame_locators.get(fid, f"frame://{ssm.scene_id}/{fid}"))
            for fid in ssm.frame_memory.frames]
    return canonical_json(doc) + "\n", refs


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _expect(doc, key, typ, path):
    if not isinstance(doc, dict):
        raise ParseError(path, "expected an object")
    if key not in doc:
        raise ParseError(f"{path}.{key}", "missing")
    value = doc[key]
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"{path}.{key}", "expected a number")
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ParseError(f"{path}.{key}", "expected an integer")
    if not isinstance(value, typ):
        raise ParseError(f"{path}.{key}", f"expected {typ.__name__}")
    return value


def _opt_str(doc, key, path):
    value = doc.get(key)
    if value is not None and not isinstance(value, str):
        raise ParseError(f"{path}.{key}", "expected string or null")
    return value


def _int_list(doc, key, path):
    value = _expect(doc, key, list, path)
    for i, item in enumerate(value):
        if isinstance(item, bool) or not isinstance(item, int):
            raise ParseError(f"{path}.{key}[{i}]", "expected an integer")
    return list(value)


def _float_triple(doc, key, path):
    value = _expect(doc, key, list, path)
    if len(value) != 3 or any(isinstance(x, bool) or not isinstance(x, (int, float))
                              for x in value):
        raise ParseError(f"{path}.{key}", "expected three numbers")
    return tuple(float(x) for x in value)


def deserialize(text: str) -> SceneMemory:
    """Rebuild a geometry-light memory from canonical JSON.

    All structures are restored except raw point clouds and embeddings:
    tracks carry only their persisted cloud summaries. Invariants are
    re-validated; violations raise ParseError naming the offending path.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError("$", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("$", "expected a top-level object")
    for key in ("episode", "scene_graph", "scratchpad", "navigation_log"):
        if key not in doc:
            raise ParseError(f"$.{key}", "missing")

    ep = doc["episode"]
    scene_id = _expect(ep, "scene_id", str, "$.episode")
    stride = _expect(ep, "stride", int, "$.episode")
    frame_ids = _int_list(ep, "frame_ids", "$.episode")
    frame_count = _expect(ep, "frame_count", int, "$.episode")
    if frame_count != len(frame_ids):
        raise ParseError("$.episode.frame_count", "does not match frame_ids")
    locators_doc = _expect(ep, "frame_locators", dict, "$.episode")
    locators: dict[int, str] = {}
    for k, v in locators_doc.items():
        try:
            fid = int(k)
        except ValueError:
            raise ParseError(f"$.episode.frame_locators.{k}", "key must be an integer")
        if not isinstance(v, str):
            raise ParseError(f"$.episode.frame_locators.{k}", "expected string")
        locators[fid] = v
    fm_doc = _expect(ep, "frame_memory", dict, "$.episode")
    fm_frames = _int_list(fm_doc, "frames", "$.episode.frame_memory")
    fm_initial = _expect(fm_doc, "initial_count", int, "$.episode.frame_memory")
    episode_set = set(frame_ids)
    for i, fid in enumerate(fm_frames):
        if fid not in episode_set:
            raise ParseError(f"$.episode.frame_memory.frames[{i}]",
                             f"frame {fid} not in episode")
    try:
        frame_memory = FrameMemory(fm_frames, fm_initial, frozenset(frame_ids))
    except MemoryError_ as exc:
        raise ParseError("$.episode.frame_memory", str(exc)) from None

    graph = SceneGraph()
    sg = doc["scene_graph"]
    tracks_doc = _expect(sg, "tracks", list, "$.scene_graph")
    for i, td in enumerate(tracks_doc):
        path = f"$.scene_graph.tracks[{i}]"
        tid = _expect(td, "id", int, path)
        caption = _expect(td, "caption", str, path)
        history = _expect(td, "caption_history", list, path)
        if any(not isinstance(c, str) for c in history):
            raise ParseError(f"{path}.caption_history", "expected strings")
        visible = _int_list(td, "visible_frames", path)
        for j, fid in enumerate(visible):
            if fid not in episode_set:
                raise ParseError(f"{path}.visible_frames[{j}]",
                                 f"frame {fid} not in episode")
        cloud_doc = td.get("cloud")
        summary = None
        if cloud_doc is not None:
            cpath = f"{path}.cloud"
            summary = CloudSummary(
                centroid=_float_triple(cloud_doc, "centroid", cpath),
                extent=_float_triple(cloud_doc, "extent", cpath),
                count=_expect(cloud_doc, "points", int, cpath))
        try:
            track = Track(id=tid, cloud=None, visual=None, language=None,
                          caption=caption, caption_history=list(history),
                          room_id=_opt_str(td, "room_id", path),
                          floor_id=_opt_str(td, "floor_id", path),
                          room_label=_opt_str(td, "room_label", path),
                          visible_frames=visible, summary=summary)
            graph.insert_track(track)
        except GraphError as exc:
            raise ParseError(path, str(exc)) from None

    edges_doc = _expect(sg, "edges", list, "$.scene_graph")
    for i, ed in enumerate(edges_doc):
        path = f"$.scene_graph.edges[{i}]"
        sid = _expect(ed, "subject_id", int, path)
        oid = _expect(ed, "object_id", int, path)
        rel = _expect(ed, "relation", str, path)
        just = _expect(ed, "justification", str, path)
        src = _expect(ed, "source_frame", int, path)
        if sid not in graph.tracks:
            raise ParseError(f"{path}.subject_id", f"unknown track {sid}")
        if oid not in graph.tracks:
            raise ParseError(f"{path}.object_id", f"unknown track {oid}")
        try:
            edge = RelationEdge(sid, oid, rel, just, src)
        except GraphError as exc:
            raise ParseError(path, str(exc)) from None
        graph.edges.append(edge)

    scratchpad: dict[int, ScratchpadEntry] = {}
    for i, pd in enumerate(doc["scratchpad"]):
        path = f"$.scratchpad[{i}]"
        nid = _expect(pd, "node_id", int, path)
        if nid not in graph.tracks:
            raise ParseError(f"{path}.node_id", f"unknown track {nid}")
        if nid in scratchpad:
            raise ParseError(f"{path}.node_id", f"duplicate entry for node {nid}")
        notes = []
        for j, nd in enumerate(_expect(pd, "notes", list, path)):
            npath = f"{path}.notes[{j}]"
            try:
                notes.append(Note(text=_expect(nd, "text", str, npath),
                                  source_api=_expect(nd, "source_api", str, npath),
                                  query=_expect(nd, "query", str, npath),
                                  evidence_frame=_expect(nd, "evidence_frame", int, npath)))
            except MemoryError_ as exc:
                raise ParseError(npath, str(exc)) from None
        scratchpad[nid] = ScratchpadEntry(nid, notes)
    if set(scratchpad) != set(graph.tracks):
        raise ParseError("$.scratchpad", "node set differs from scene_graph.tracks")

    nav_log: list[NavLogEntry] = []
    for i, nd in enumerate(doc["navigation_log"]):
        path = f"$.navigation_log[{i}]"
        motion = _expect(nd, "motion_label", str, path)
        if motion not in MOTION_LABELS:
            raise ParseError(f"{path}.motion_label", f"unknown label '{motion}'")
        visible = _int_list(nd, "visible_node_ids", path)
        for j, nid in enumerate(visible):
            if nid not in graph.tracks:
                raise ParseError(f"{path}.visible_node_ids[{j}]", f"unknown track {nid}")
        nav_log.append(NavLogEntry(
            frame_id=_expect(nd, "frame_id", int, path),
            room_label=_expect(nd, "room_label", str, path),
            fov_tag=_expect(nd, "fov_tag", str, path),
            motion_label=motion,
            visible_node_ids=visible))
    if [e.frame_id for e in nav_log] != frame_ids:
        raise ParseError("$.navigation_log", "entries do not cover episode frame_ids")

    return SceneMemory(graph=graph, scratchpad=scratchpad, frame_memory=frame_memory,
                       nav_log=nav_log, scene_id=scene_id, stride=stride,
                       frame_ids=frame_ids, frame_locators=locators)


# ---------------------------------------------------------------------------
# Persistence: directory layout ssm.json + clouds.bin + embeddings.bin
# ---------------------------------------------------------------------------

_CLOUD_MAGIC = b"SMCLOUD1"
_EMBED_MAGIC = b"SMEMBED1"
_KIND_CODES = {"visual": 0, "language": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def _pack_clouds(ssm: SceneMemory) -> bytes:
    parts = [_CLOUD_MAGIC]
    with_clouds = [(tid, t.cloud) for tid, t in sorted(ssm.graph.tracks.items())
                   if t.cloud is not None]
    parts.append(struct.pack("<I", len(with_clouds)))
    for tid, cloud in with_clouds:
        pts = np.ascontiguousarray(cloud.points, dtype="<f4")
        parts.append(struct.pack("<II", tid, len(cloud)))
        parts.append(pts.tobytes())
    return b"".join(parts)


def _unpack_clouds(blob: bytes) -> dict[int, PointCloud]:
    if blob[:8] != _CLOUD_MAGIC:
        raise ParseError("clouds.bin", "bad magic")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    out: dict[int, PointCloud] = {}
    for _ in range(count):
        tid, npts = struct.unpack_from("<II", blob, offset)
        offset += 8
        arr = np.frombuffer(blob, dtype="<f4", count=npts * 3, offset=offset)
        offset += npts * 3 * 4
        out[tid] = PointCloud(arr.reshape(npts, 3).astype(np.float64))
    return out


def _pack_embeddings(ssm: SceneMemory) -> bytes:
    records = []
    for tid, t in sorted(ssm.graph.tracks.items()):
        for kind in ("visual", "language"):
            emb = getattr(t, kind)
            if emb is not None:
                records.append((tid, kind, emb))
    parts = [_EMBED_MAGIC, struct.pack("<I", len(records))]
    for tid, kind, emb in records:
        vec = np.ascontiguousarray(emb.vector, dtype="<f4")
        parts.append(struct.pack("<IBI", tid, _KIND_CODES[kind], vec.size))
        parts.append(vec.tobytes())
    return b"".join(parts)


def _unpack_embeddings(blob: bytes) -> dict[tuple[int, str], Embedding]:
    if blob[:8] != _EMBED_MAGIC:
        raise ParseError("embeddings.bin", "bad magic")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    out: dict[tuple[int, str], Embedding] = {}
    for _ in range(count):
        tid, code, dim = struct.unpack_from("<IBI", blob, offset)
        offset += 9
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += dim * 4
        kind = _KIND_NAMES.get(code)
        if kind is None:
            raise ParseError("embeddings.bin", f"unknown kind code {code}")
        out[(tid, kind)] = Embedding(vec.astype(np.float64), kind)
    return out


def save_dir(ssm: SceneMemory, path: str | Path) -> None:
    """Persist to a directory: ssm.json (canonical form), clouds.bin
    (float32 LE point triples per track), embeddings.bin (float32 LE
    vectors keyed by track id and kind). Clouds are stored at float32
    precision; reloaded summaries may differ in the last serialized
    decimal for adversarially placed coordinates."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    text, _ = serialize(ssm)
    (path / "ssm.json").write_text(text, encoding="utf-8")
    (path / "clouds.bin").write_bytes(_pack_clouds(ssm))
    (path / "embeddings.bin").write_bytes(_pack_embeddings(ssm))


def load_dir(path: str | Path) -> SceneMemory:
    """Load a persisted memory, restoring clouds and embeddings."""
    path = Path(path)
    ssm = deserialize((path / "ssm.json").read_text(encoding="utf-8"))
    clouds_file = path / "clouds.bin"
    if clouds_file.exists():
        clouds = _unpack_clouds(clouds_file.read_bytes())
        for tid, cloud in clouds.items():
            if tid in ssm.graph.tracks:
                t = ssm.graph.tracks[tid]
                ssm.graph.tracks[tid] = replace(t, cloud=cloud, summary=None)
    embed_file = path / "embeddings.bin"
    if embed_file.exists():
        embeds = _unpack_embeddings(embed_file.read_bytes())
        for (tid, kind), emb in embeds.items():
            if tid in ssm.graph.tracks:
                t = ssm.graph.tracks[tid]
                ssm.graph.tracks[tid] = replace(t, **{kind: emb})
    return ssm
