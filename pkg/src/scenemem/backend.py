"""Wire protocol for all model-dependent work.

Every call that would touch a neural model (detection, relation
prediction, caption consolidation, frame analysis, field-of-view tagging,
room-label scoring, reasoning) goes through a BackendRequest and comes
back as a validated, typed response. No unvalidated model output crosses
into the engine: validate_response enforces the kind-specific schema,
rejects unknown relation labels, and clamps bounding boxes that overflow
the frame by at most 2 px (larger overflows are rejected).

Transport errors are retried once; schema errors never are (they are
systematic, a retry wastes budget).

Detect/analyze items may carry an exact pixel mask (row runs) and
visual/language embedding vectors. Mask extraction and embedding models
sit behind this protocol; when a backend omits them the engine falls back
to a bbox-rectangle mask and deterministic caption-hash embeddings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

REQUEST_KINDS = ("detect", "relations", "consolidate", "analyze", "fov",
                 "room_label", "reason")

API_ACTION_KINDS = ("find_objects", "analyze_objects", "analyze_frame",
                    "retrieve_frame")

BBOX_CLAMP_PX = 2


class BackendError(Exception):
    """Base class for typed backend failures."""


class TransportError(BackendError):
    """The request never produced a parseable response (timeout, refused
    connection, malformed body). Retried once."""


class SchemaError(BackendError):
    """The response parsed but violates the kind schema. Never retried."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class BackendRequest:
    kind: str
    frame_id: int | None = None
    query: str | None = None
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind '{self.kind}'")

    def to_doc(self) -> dict:
        return {"kind": self.kind, "frame_id": self.frame_id,
                "query": self.query, "payload": self.payload}

    def digest(self) -> str:
        text = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- typed responses --------------------------------------------------------

@dataclass(frozen=True)
class WireObject:
    bbox: tuple[int, int, int, int]
    caption: str
    note: str | None = None
    mask_runs: tuple[tuple[int, int, int], ...] | None = None
    visual_embedding: tuple[float, ...] | None = None
    language_embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class WireRelation:
    subject_id: int
    object_id: int
    relation: str
    justification: str


@dataclass(frozen=True)
class DetectResponse:
    objects: tuple[WireObject, ...]


@dataclass(frozen=True)
class RelationsResponse:
    relations: tuple[WireRelation, ...]


@dataclass(frozen=True)
class ConsolidateResponse:
    sentence: str


@dataclass(frozen=True)
class AnalyzeResponse:
    new_objects: tuple[WireObject, ...]
    notes: tuple[tuple[int, str], ...]  # (node_id, note text)


@dataclass(frozen=True)
class FovResponse:
    tag: str


@dataclass(frozen=True)
class RoomLabelResponse:
    scores: tuple[float, ...]


@dataclass(frozen=True)
class ReasonAction:
    api: str
    frame_id: int
    query: str
    node_ids: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ReasonAnswer:
    text: str
    evidence_frames: tuple[int, ...]
    evidence_notes: tuple[tuple[int, int], ...]  # (node_id, note index)


@dataclass(frozen=True)
class ReasonResponse:
    action: ReasonAction | None
    answer: ReasonAnswer | None


# -- validation -------------------------------------------------------------

def _need(doc, key, typ, path):
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected an object")
    if key not in doc:
        raise SchemaError(f"{path}.{key}", "missing")
    value = doc[key]
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{path}.{key}", "expected a number")
        return float(value)
    if typ is int and isinstance(value, bool):
        raise SchemaError(f"{path}.{key}", "expected an integer")
    if not isinstance(value, typ):
        raise SchemaError(f"{path}.{key}", f"expected {typ.__name__}")
    return value


def _clamped_bbox(raw, frame_size, path) -> tuple[int, int, int, int]:
    if (not isinstance(raw, (list, tuple)) or len(raw) != 4
            or any(isinstance(x, bool) or not isinstance(x, int) for x in raw)):
        raise SchemaError(path, "expected four integers")
    u0, v0, u1, v1 = raw
    if frame_size is not None:
        w, h = frame_size
        for name, val, limit in (("u_min", u0, w), ("v_min", v0, h),
                                 ("u_max", u1, w), ("v_max", v1, h)):
            if val < -BBOX_CLAMP_PX or val > limit - 1 + BBOX_CLAMP_PX:
                raise SchemaError(path, f"{name}={val} overflows frame by more "
                                        f"than {BBOX_CLAMP_PX} px")
        u0 = min(max(u0, 0), w - 1)
        u1 = min(max(u1, 0), w - 1)
        v0 = min(max(v0, 0), h - 1)
        v1 = min(max(v1, 0), h - 1)
    if u0 > u1 or v0 > v1:
        raise SchemaError(path, "bbox not well-ordered")
    return (u0, v0, u1, v1)


def _embedding(doc, key, path) -> tuple[float, ...] | None:
    raw = doc.get(key)
    if raw is None:
        return None
    if not isinstance(raw, list) or not raw:
        raise SchemaError(f"{path}.{key}", "expected a nonempty number array")
    out = []
    for i, x in enumerate(raw):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaError(f"{path}.{key}[{i}]", "expected a number")
        out.append(float(x))
    return tuple(out)


def _wire_object(doc, frame_size, path) -> WireObject:
    bbox = _clamped_bbox(_need(doc, "bbox", list, path), frame_size, f"{path}.bbox")
    caption = _need(doc, "caption", str, path)
    if not caption.strip():
        raise SchemaError(f"{path}.caption", "must be nonempty")
    note = doc.get("note")
    if note is not None and not isinstance(note, str):
        raise SchemaError(f"{path}.note", "expected string or null")
    runs = None
    if doc.get("mask_runs") is not None:
        raw_runs = doc["mask_runs"]
        if not isinstance(raw_runs, list):
            raise SchemaError(f"{path}.mask_runs", "expected an array")
        parsed = []
        for i, run in enumerate(raw_runs):
            if (not isinstance(run, (list, tuple)) or len(run) != 3
                    or any(isinstance(x, bool) or not isinstance(x, int) for x in run)):
                raise SchemaError(f"{path}.mask_runs[{i}]", "expected [v, u_start, u_end]")
            v, us, ue = run
            if us > ue:
                raise SchemaError(f"{path}.mask_runs[{i}]", "run not well-ordered")
            if frame_size is not None:
                w, h = frame_size
                if not (0 <= v < h and 0 <= us and ue < w):
                    raise SchemaError(f"{path}.mask_runs[{i}]", "run outside frame")
            parsed.append((v, us, ue))
        runs = tuple(parsed)
    return WireObject(bbox=bbox, caption=caption, note=note, mask_runs=runs,
                      visual_embedding=_embedding(doc, "visual_embedding", path),
                      language_embedding=_embedding(doc, "language_embedding", path))


def validate_response(kind: str, raw, frame_size: tuple[int, int] | None = None):
    """Strictly validate a raw JSON response for ``kind``.

    Returns the kind's typed response. Raises SchemaError with a
    path-precise diagnostic on any violation.
    """
    from .graph import RELATION_LABELS

    if kind not in REQUEST_KINDS:
        raise SchemaError("$", f"unknown request kind '{kind}'")
    if not isinstance(raw, dict):
        raise SchemaError("$", "response must be a JSON object")

    if kind == "detect":
        items = _need(raw, "detections", list, "$")
        return DetectResponse(tuple(
            _wire_object(d, frame_size, f"$.detections[{i}]")
            for i, d in enumerate(items)))

    if kind == "relations":
        items = _need(raw, "relations", list, "$")
        rels = []
        for i, r in enumerate(items):
            path = f"$.relations[{i}]"
            label = _need(r, "relation", str, path)
            if label not in RELATION_LABELS:
                raise SchemaError(f"{path}.relation", f"unknown label '{label}'")
            rels.append(WireRelation(
                subject_id=_need(r, "subject_id", int, path),
                object_id=_need(r, "object_id", int, path),
                relation=label,
                justification=_need(r, "justification", str, path)))
        return RelationsResponse(tuple(rels))

    if kind == "consolidate":
        sentence = _need(raw, "sentence", str, "$")
        if not sentence.strip():
            raise SchemaError("$.sentence", "must be nonempty")
        return ConsolidateResponse(sentence)

    if kind == "analyze":
        new_items = _need(raw, "new_objects", list, "$")
        objs = tuple(_wire_object(d, frame_size, f"$.new_objects[{i}]")
                     for i, d in enumerate(new_items))
        notes = []
        for i, n in enumerate(_need(raw, "notes", list, "$")):
            path = f"$.notes[{i}]"
            notes.append((_need(n, "node_id", int, path),
                          _need(n, "note", str, path)))
        return AnalyzeResponse(objs, tuple(notes))

    if kind == "fov":
        return FovResponse(tag=_need(raw, "tag", str, "$"))

    if kind == "room_label":
        scores = _need(raw, "scores", list, "$")
        out = []
        for i, s in enumerate(scores):
            if isinstance(s, bool) or not isinstance(s, (int, float)):
                raise SchemaError(f"$.scores[{i}]", "expected a number")
            out.append(float(s))
        return RoomLabelResponse(tuple(out))

    # kind == "reason"
    has_action = "action" in raw and raw["action"] is not None
    has_answer = "final_answer" in raw and raw["final_answer"] is not None
    if has_action == has_answer:
        raise SchemaError("$", "need exactly one of action / final_answer")
    if has_action:
        act = raw["action"]
        api = _need(act, "api", str, "$.action")
        if api not in API_ACTION_KINDS:
            raise SchemaError("$.action.api", f"unknown api '{api}'")
        frame_id = _need(act, "frame_id", int, "$.action")
        query = _need(act, "query", str, "$.action")
        if api != "retrieve_frame" and not query.strip():
            raise SchemaError("$.action.query", "must be nonempty")
        node_ids = None
        if api == "analyze_objects":
            ids = _need(act, "node_ids", list, "$.action")
            if not ids or any(isinstance(x, bool) or not isinstance(x, int)
                              for x in ids):
                raise SchemaError("$.action.node_ids", "expected nonempty integers")
            node_ids = tuple(ids)
        elif act.get("node_ids") is not None:
            raise SchemaError("$.action.node_ids",
                              f"not allowed for api '{api}'")
        return ReasonResponse(
            action=ReasonAction(api, frame_id, query, node_ids), answer=None)
    ans_text = _need(raw, "final_answer", str, "$")
    frames = _need(raw, "evidence_frames", list, "$")
    if any(isinstance(x, bool) or not isinstance(x, int) for x in frames):
        raise SchemaError("$.evidence_frames", "expected integers")
    notes_raw = _need(raw, "evidence_notes", list, "$")
    notes = []
    for i, n in enumerate(notes_raw):
        if (not isinstance(n, (list, tuple)) or len(n) != 2
                or any(isinstance(x, bool) or not isinstance(x, int) for x in n)):
            raise SchemaError(f"$.evidence_notes[{i}]", "expected [node_id, note_index]")
        notes.append((n[0], n[1]))
    return ReasonResponse(action=None, answer=ReasonAnswer(
        text=ans_text, evidence_frames=tuple(frames), evidence_notes=tuple(notes)))


# -- transports -------------------------------------------------------------

class Backend:
    """Synchronous request/response transport with per-kind call counters.

    Subclasses implement raw_call returning the raw JSON document.
    ``call`` retries once on TransportError and validates before returning;
    callers therefore never see unvalidated content.
    """

    def __init__(self):
        self.call_counts: dict[str, int] = {k: 0 for k in REQUEST_KINDS}

    def raw_call(self, request: BackendRequest) -> dict:
        raise NotImplementedError

    def frame_size(self, frame_id: int | None) -> tuple[int, int] | None:
        """Frame bounds for bbox validation; None when unknown."""
        return None

    def call(self, request: BackendRequest):
        self.call_counts[request.kind] += 1
        try:
            raw = self.raw_call(request)
        except TransportError as exc:
            logger.warning("transport failure (%s), retrying once: %s",
                           request.kind, exc)
            raw = self.raw_call(request)
        return validate_response(request.kind, raw,
                                 self.frame_size(request.frame_id))


class HttpBackend(Backend):
    """JSON-over-HTTP adapter: POST /<kind> with the request document."""

    def __init__(self, base_url: str, timeout: float = 30.0,
                 frame_sizes: dict[int, tuple[int, int]] | None = None):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._frame_sizes = frame_sizes or {}

    def frame_size(self, frame_id):
        return self._frame_sizes.get(frame_id)

    def raw_call(self, request: BackendRequest) -> dict:
        body = json.dumps(request.to_doc()).encode("utf-8")
        req = urllib.request.Request(
            f"{self.base_url}/{request.kind}", data=body,
            headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(str(exc)) from exc
        try:
            return json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TransportError(f"unparseable response body: {exc}") from exc


class RecordingBackend(Backend):
    """Wraps another backend, appending (request digest, raw response)
    records to a JSON-lines log for later replay."""

    def __init__(self, inner: Backend, log_path: str | Path):
        super().__init__()
        self.inner = inner
        self.log_path = Path(log_path)
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self.log_path.write_text("", encoding="utf-8")

    def frame_size(self, frame_id):
        return self.inner.frame_size(frame_id)

    def raw_call(self, request: BackendRequest) -> dict:
        raw = self.inner.raw_call(request)
        record = {"digest": request.digest(), "kind": request.kind, "response": raw}
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return raw


class ReplayBackend(Backend):
    """Replays a recorded log in order, verifying request digests match."""

    def __init__(self, log_path: str | Path,
                 frame_sizes: dict[int, tuple[int, int]] | None = None):
        super().__init__()
        self.records = [json.loads(line) for line
                        in Path(log_path).read_text(encoding="utf-8").splitlines()
                        if line.strip()]
        self.cursor = 0
        self._frame_sizes = frame_sizes or {}

    def frame_size(self, frame_id):
        return self._frame_sizes.get(frame_id)

    def raw_call(self, request: BackendRequest) -> dict:
        if self.cursor >= len(self.records):
            raise TransportError("replay log exhausted")
        record = self.records[self.cursor]
        if record["digest"] != request.digest():
            raise TransportError(
                f"replay mismatch at record {self.cursor}: expected kind "
                f"{record['kind']}, got {request.kind}")
        self.cursor += 1
        return record["response"]
