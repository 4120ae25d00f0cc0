"""Wire-protocol validation, retry policy, scripted-backend determinism
and record/replay stability."""

from __future__ import annotations

import json

import numpy as np
import pytest

from scenemem import (Backend, BackendRequest, RecordingBackend, ReplayBackend,
                      SchemaError, ScriptedBackend, TransportError,
                      validate_response)
from scenemem.backend import ReasonResponse
from scenemem.scripted import ScriptReasoner, _iou


class TestValidateResponse:
    def test_unknown_relation_label_rejected(self):
        raw = {"relations": [{"subject_id": 0, "object_id": 1,
                              "relation": "next_to", "justification": ""}]}
        with pytest.raises(SchemaError) as err:
            validate_response("relations", raw)
        assert "$.relations[0].relation" in str(err.value)
        assert "next_to" in str(err.value)

    def test_bbox_one_px_overflow_clamped(self):
        raw = {"detections": [{"bbox": [0, 0, 64, 47], "caption": "mug"}]}
        out = validate_response("detect", raw, frame_size=(64, 48))
        assert out.objects[0].bbox == (0, 0, 63, 47)

    def test_bbox_negative_two_px_clamped(self):
        raw = {"detections": [{"bbox": [-2, -1, 10, 10], "caption": "mug"}]}
        out = validate_response("detect", raw, frame_size=(64, 48))
        assert out.objects[0].bbox == (0, 0, 10, 10)

    def test_bbox_fifty_px_overflow_rejected(self):
        raw = {"detections": [{"bbox": [0, 0, 113, 47], "caption": "mug"}]}
        with pytest.raises(SchemaError) as err:
            validate_response("detect", raw, frame_size=(64, 48))
        assert "$.detections[0].bbox" in str(err.value)

    def test_bbox_three_px_overflow_rejected(self):
        raw = {"detections": [{"bbox": [0, 0, 66, 40], "caption": "m"}]}
        with pytest.raises(SchemaError):
            validate_response("detect", raw, frame_size=(64, 48))

    def test_inverted_bbox_rejected(self):
        raw = {"detections": [{"bbox": [10, 0, 5, 40], "caption": "m"}]}
        with pytest.raises(SchemaError):
            validate_response("detect", raw, frame_size=(64, 48))

    def test_empty_caption_rejected(self):
        raw = {"detections": [{"bbox": [0, 0, 5, 5], "caption": "  "}]}
        with pytest.raises(SchemaError) as err:
            validate_response("detect", raw, frame_size=(64, 48))
        assert "caption" in str(err.value)

    def test_mask_run_outside_frame_rejected(self):
        raw = {"detections": [{"bbox": [0, 0, 5, 5], "caption": "m",
                               "mask_runs": [[50, 0, 5]]}]}
        with pytest.raises(SchemaError):
            validate_response("detect", raw, frame_size=(64, 48))

    def test_consolidate_sentence(self):
        assert validate_response("consolidate", {"sentence": "a mug"}).sentence == "a mug"
        with pytest.raises(SchemaError):
            validate_response("consolidate", {"sentence": ""})

    def test_malformed_top_level_rejected(self):
        with pytest.raises(SchemaError):
            validate_response("detect", ["not", "an", "object"])
        with pytest.raises(SchemaError):
            validate_response("detect", {"wrong_key": []})

    def test_analyze_shape(self):
        raw = {"new_objects": [{"bbox": [0, 0, 3, 3], "caption": "c", "note": "n"}],
               "notes": [{"node_id": 4, "note": "hello"}]}
        out = validate_response("analyze", raw, frame_size=(64, 48))
        assert out.new_objects[0].note == "n"
        assert out.notes == ((4, "hello"),)

    def test_reason_requires_exactly_one_of_action_answer(self):
        with pytest.raises(SchemaError):
            validate_response("reason", {})
        with pytest.raises(SchemaError):
            validate_response("reason", {
                "action": {"api": "analyze_frame", "frame_id": 0, "query": "q"},
                "final_answer": "x", "evidence_frames": [], "evidence_notes": []})

    def test_reason_action_parsed(self):
        out = validate_response("reason", {
            "action": {"api": "analyze_objects", "frame_id": 3, "query": "q",
                       "node_ids": [1, 2]}})
        assert isinstance(out, ReasonResponse)
        assert out.action.node_ids == (1, 2)

    def test_reason_node_ids_only_for_analyze_objects(self):
        with pytest.raises(SchemaError):
            validate_response("reason", {
                "action": {"api": "analyze_frame", "frame_id": 0, "query": "q",
                           "node_ids": [1]}})
        with pytest.raises(SchemaError):
            validate_response("reason", {
                "action": {"api": "analyze_objects", "frame_id": 0, "query": "q"}})

    def test_reason_answer_parsed(self):
        out = validate_response("reason", {
            "final_answer": "blue", "evidence_frames": [3],
            "evidence_notes": [[0, 1]]})
        assert out.answer.evidence_notes == ((0, 1),)

    def test_unknown_api_rejected(self):
        with pytest.raises(SchemaError):
            validate_response("reason", {
                "action": {"api": "teleport", "frame_id": 0, "query": "q"}})

    def test_room_label_scores(self):
        out = validate_response("room_label", {"scores": [0.1, 0.9]})
        assert out.scores == (0.1, 0.9)
        with pytest.raises(SchemaError):
            validate_response("room_label", {"scores": ["high"]})

    def test_embedding_must_be_numbers(self):
        raw = {"detections": [{"bbox": [0, 0, 3, 3], "caption": "c",
                               "visual_embedding": [0.1, "x"]}]}
        with pytest.raises(SchemaError):
            validate_response("detect", raw, frame_size=(64, 48))


class _FlakyBackend(Backend):
    """Fails transport n times, then succeeds; or returns garbage."""

    def __init__(self, transport_failures=0, garbage=False):
        super().__init__()
        self.transport_failures = transport_failures
        self.garbage = garbage
        self.raw_calls = 0

    def raw_call(self, request):
        self.raw_calls += 1
        if self.raw_calls <= self.transport_failures:
            raise TransportError("flaky")
        if self.garbage:
            return {"nonsense": 1}
        return {"sentence": "ok"}


class TestRetryPolicy:
    def test_single_transport_failure_retried(self):
        backend = _FlakyBackend(transport_failures=1)
        out = backend.call(BackendRequest(kind="consolidate",
                                          payload={"captions": ["a"]}))
        assert out.sentence == "ok"
        assert backend.raw_calls == 2

    def test_two_transport_failures_raise(self):
        backend = _FlakyBackend(transport_failures=2)
        with pytest.raises(TransportError):
            backend.call(BackendRequest(kind="consolidate"))
        assert backend.raw_calls == 2  # exactly one retry

    def test_schema_failure_never_retried(self):
        backend = _FlakyBackend(garbage=True)
        with pytest.raises(SchemaError):
            backend.call(BackendRequest(kind="consolidate"))
        assert backend.raw_calls == 1

    def test_call_counts_tracked(self):
        backend = _FlakyBackend()
        backend.call(BackendRequest(kind="consolidate"))
        backend.call(BackendRequest(kind="consolidate"))
        assert backend.call_counts["consolidate"] == 2
        assert backend.call_counts["detect"] == 0


class TestScriptedBackend:
    def test_detect_returns_ground_truth(self, small_scene):
        backend = ScriptedBackend(small_scene)
        out = backend.call(BackendRequest(kind="detect", frame_id=0))
        truth = small_scene.gt_detections(0)
        assert len(out.objects) == len(truth)
        assert {o.caption for o in out.objects} \
            == {small_scene.objects[d.object_index].caption for d in truth}

    def test_query_filters_to_relevant_objects(self, small_scene):
        backend = ScriptedBackend(small_scene)
        target = small_scene.objects[0]
        fid = next(f for f in range(small_scene.frame_count)
                   if target.index in small_scene.visible_objects(f))
        out = backend.call(BackendRequest(kind="detect", frame_id=fid,
                                          query=f"find the {target.caption}"))
        assert any(o.caption == target.caption for o in out.objects)

    def test_unmatched_specific_query_empty(self, small_scene):
        backend = ScriptedBackend(small_scene)
        out = backend.call(BackendRequest(kind="detect", frame_id=0,
                                          query="mug"))
        assert out.objects == ()

    def test_relations_empty_for_no_visible_pairs(self, small_scene):
        backend = ScriptedBackend(small_scene)
        out = backend.call(BackendRequest(kind="relations", frame_id=0,
                                          payload={"visible": []}))
        assert out.relations == ()

    def test_identical_request_sequences_identical_responses(self, small_scene):
        req_seq = [BackendRequest(kind="detect", frame_id=f % small_scene.frame_count,
                                  query=None if f % 2 else "all objects")
                   for f in range(8)]
        a = ScriptedBackend(small_scene, miss_prob=0.3, seed=5)
        b = ScriptedBackend(small_scene, miss_prob=0.3, seed=5)
        for req in req_seq:
            assert a.raw_call(req) == b.raw_call(req)

    def test_miss_probability_binomial(self, small_scene):
        """Mean detections over many trials matches n*p within a generous
        binomial interval."""
        fid = 0
        n_objects = len(small_scene.gt_detections(fid))
        assert n_objects >= 2
        backend = ScriptedBackend(small_scene, miss_prob=0.5, seed=9)
        trials = 500
        total = sum(len(backend.raw_call(
            BackendRequest(kind="detect", frame_id=fid))["detections"])
            for _ in range(trials))
        mean = total / trials
        expect = n_objects * 0.5
        # 99% CI half-width for the mean of binomial(n_objects, 0.5)
        half = 2.58 * np.sqrt(n_objects * 0.25 / trials)
        assert abs(mean - expect) <= half

    def test_unknown_frame_errors(self, small_scene):
        backend = ScriptedBackend(small_scene)
        with pytest.raises(Exception):
            backend.call(BackendRequest(kind="detect", frame_id=999))

    def test_bbox_jitter_withholds_masks(self, small_scene):
        backend = ScriptedBackend(small_scene, bbox_jitter=2, seed=3)
        out = backend.call(BackendRequest(kind="detect", frame_id=0))
        assert all(o.mask_runs is None for o in out.objects)

    def test_fail_hook_transport_then_recovers(self, small_scene):
        backend = ScriptedBackend(small_scene)
        backend.fail("detect", times=2)
        with pytest.raises(TransportError):
            backend.call(BackendRequest(kind="detect", frame_id=0))
        out = backend.call(BackendRequest(kind="detect", frame_id=0))
        assert out.objects

    def test_fail_hook_schema_mode(self, small_scene):
        backend = ScriptedBackend(small_scene)
        backend.fail("detect", times=1, mode="schema")
        with pytest.raises(SchemaError):
            backend.call(BackendRequest(kind="detect", frame_id=0))


class TestRecordReplay:
    def test_replay_reproduces_responses_byte_identically(self, small_scene, tmp_path):
        log = tmp_path / "log.jsonl"
        inner = ScriptedBackend(small_scene, miss_prob=0.2, seed=4)
        recorder = RecordingBackend(inner, log)
        requests = [BackendRequest(kind="detect", frame_id=f)
                    for f in range(small_scene.frame_count)]
        recorded = [recorder.raw_call(r) for r in requests]
        replayer = ReplayBackend(log)
        replayed = [replayer.raw_call(r) for r in requests]
        assert json.dumps(recorded, sort_keys=True) \
            == json.dumps(replayed, sort_keys=True)

    def test_replay_mismatch_detected(self, small_scene, tmp_path):
        log = tmp_path / "log.jsonl"
        recorder = RecordingBackend(ScriptedBackend(small_scene), log)
        recorder.raw_call(BackendRequest(kind="detect", frame_id=0))
        replayer = ReplayBackend(log)
        with pytest.raises(TransportError):
            replayer.raw_call(BackendRequest(kind="detect", frame_id=1))

    def test_replay_exhaustion_detected(self, small_scene, tmp_path):
        log = tmp_path / "log.jsonl"
        RecordingBackend(ScriptedBackend(small_scene), log)
        replayer = ReplayBackend(log)
        with pytest.raises(TransportError):
            replayer.raw_call(BackendRequest(kind="detect", frame_id=0))


class TestScriptReasoner:
    def test_steps_replay_in_order(self):
        reasoner = ScriptReasoner(scripts={"q": [
            {"action": {"api": "analyze_frame", "frame_id": 0, "query": "look"}},
            {"final_answer": "done", "evidence_frames": [0],
             "evidence_notes": [[0, 0]]},
        ]})
        payload = {"question": "q", "memory_json": "{}"}
        first = reasoner.decide(payload)
        second = reasoner.decide(payload)
        third = reasoner.decide(payload)  # script exhausted: repeats last
        assert "action" in first
        assert second["final_answer"] == "done"
        assert third == second

    def test_auto_evidence_resolution(self):
        memory = {"episode": {"frame_memory": {"frames": [7, 9]}},
                  "scratchpad": [{"node_id": 3, "notes": []},
                                 {"node_id": 5, "notes": [{"text": "x"}]}]}
        reasoner = ScriptReasoner(scripts={"q": [
            {"final_answer": "a", "evidence": "auto"}]})
        out = reasoner.decide({"question": "q",
                               "memory_json": json.dumps(memory)})
        assert out["evidence_frames"] == [7]
        assert out["evidence_notes"] == [[5, 0]]


def test_iou_basics():
    assert _iou((0, 0, 9, 9), (0, 0, 9, 9)) == 1.0
    assert _iou((0, 0, 4, 4), (10, 10, 12, 12)) == 0.0
    assert 0.0 < _iou((0, 0, 9, 9), (5, 0, 14, 9)) < 1.0


def test_request_kind_validated():
    with pytest.raises(ValueError):
        BackendRequest(kind="telepathy")
