"""Synthetic scene generation: determinism, analytic raycast oracle,
relation derivation, visibility guarantees and question generation."""

from __future__ import annotations

import json

import numpy as np
import pytest

from scenemem import PixelMask, backproject, generate_questions, generate_scene
from scenemem.synth import (Box, GenerationError, SceneObject, SyntheticScene,
                            derive_relations, load_questions, save_questions)

from conftest import rng


def ray_box_intersect(origin, direction, box: Box) -> float | None:
    """Scalar slab-method oracle; returns entry parameter or None."""
    t0, t1 = -np.inf, np.inf
    for axis in range(3):
        o, d = origin[axis], direction[axis]
        lo, hi = box.lo[axis], box.hi[axis]
        if abs(d) < 1e-12:
            if not lo <= o <= hi:
                return None
            continue
        a, b = (lo - o) / d, (hi - o) / d
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
    if t0 > t1 or t1 <= 0 or t0 <= 1e-6:
        return None
    return t0


class TestDeterminism:
    def test_same_seed_identical_scene(self):
        a = generate_scene(2, 3, seed=42)
        b = generate_scene(2, 3, seed=42)
        assert [o.caption for o in a.objects] == [o.caption for o in b.objects]
        assert [(r.subject_index, r.relation, r.object_index) for r in a.relations] \
            == [(r.subject_index, r.relation, r.object_index) for r in b.relations]
        for pa, pb in zip(a.poses, b.poses):
            assert np.array_equal(pa.rotation, pb.rotation)
            assert np.array_equal(pa.translation, pb.translation)
        da, _ = a.render(0)
        db, _ = b.render(0)
        assert np.array_equal(da, db)

    def test_different_seeds_differ(self):
        a = generate_scene(2, 3, seed=1)
        b = generate_scene(2, 3, seed=2)
        assert [o.caption for o in a.objects] != [o.caption for o in b.objects]

    def test_truth_file_round_trip(self, tmp_path):
        scene = generate_scene(3, 2, seed=9)
        scene.save(tmp_path / "truth.json")
        loaded = SyntheticScene.load(tmp_path / "truth.json")
        assert loaded.scene_id == scene.scene_id
        assert [o.caption for o in loaded.objects] == [o.caption for o in scene.objects]
        assert np.array_equal(loaded.render(2)[0], scene.render(2)[0])

    def test_truth_file_format_guard(self, tmp_path):
        (tmp_path / "bogus.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(GenerationError):
            SyntheticScene.load(tmp_path / "bogus.json")


class TestRaycast:
    def test_depth_matches_analytic_intersection(self, small_scene):
        scene = small_scene
        depth, idmap = scene.render(0)
        pose = scene.poses[0]
        intr = scene.intrinsics
        boxes = list(scene.structure_boxes) + [o.box for o in scene.objects]
        g = rng(17)
        for _ in range(120):
            u = int(g.integers(0, intr.width))
            v = int(g.integers(0, intr.height))
            d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
            d_world = pose.rotation @ d_cam
            hits = [ray_box_intersect(pose.translation, d_world, box)
                    for box in boxes]
            hits = [h for h in hits if h is not None]
            if not hits:
                assert depth[v, u] == 0.0
            else:
                assert depth[v, u] == pytest.approx(min(hits), abs=1e-9)

    def test_idmap_matches_nearest_box(self, small_scene):
        scene = small_scene
        _, idmap = scene.render(3)
        pose = scene.poses[3]
        intr = scene.intrinsics
        boxes, ids = scene._all_boxes()
        g = rng(18)
        for _ in range(60):
            u = int(g.integers(0, intr.width))
            v = int(g.integers(0, intr.height))
            d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
            d_world = pose.rotation @ d_cam
            best, best_id = np.inf, -2
            for box, bid in zip(boxes, ids):
                h = ray_box_intersect(pose.translation, d_world, box)
                if h is not None and h < best:
                    best, best_id = h, bid
            assert idmap[v, u] == best_id

    def test_masked_pixels_backproject_onto_boxes(self, small_scene):
        """Back-projected detection masks must land on the generating box
        surface within one voxel for at least 99% of pixels."""
        scene = small_scene
        episode = scene.episode()
        total = on_surface = 0
        for fid in range(scene.frame_count):
            frame = episode.frame(fid)
            for det in scene.gt_detections(fid):
                box = scene.objects[det.object_index].box
                mask = PixelMask.from_runs(det.mask_runs, frame.intrinsics.width,
                                           frame.intrinsics.height)
                cloud = backproject(frame.depth, mask, frame.intrinsics, frame.pose)
                lo = np.asarray(box.lo) - 0.02
                hi = np.asarray(box.hi) + 0.02
                inside = ((cloud.points >= lo) & (cloud.points <= hi)).all(axis=1)
                total += len(cloud)
                on_surface += int(inside.sum())
        assert total > 0
        assert on_surface / total >= 0.99

    def test_invalid_depth_outside_scene(self, small_scene):
        # some rays above the horizon escape without hitting any box
        depth, idmap = small_scene.render(0)
        assert (idmap == -2).sum() == (depth == 0.0).sum()


class TestRelations:
    def test_cup_on_table_template(self):
        scene = generate_scene(1, 2, seed=0)
        rels = [(scene.objects[r.subject_index].class_name, r.relation,
                 scene.objects[r.object_index].class_name)
                for r in scene.relations]
        assert ("cup", "on_top_of", "table") in rels

    def test_geometric_derivation_on_top(self):
        table = SceneObject(0, "table", "red",
                            Box((0, 0, 0), (1.0, 0.7, 0.72)), 0)
        cup = SceneObject(1, "cup", "blue",
                          Box((0.4, 0.3, 0.72), (0.52, 0.42, 0.86)), 0)
        rels = derive_relations([table, cup], {})
        assert [(r.subject_index, r.relation, r.object_index) for r in rels] \
            == [(1, "on_top_of", 0)]

    def test_geometric_derivation_containment(self):
        crate = SceneObject(0, "crate", "red", Box((0, 0, 0), (0.6, 0.6, 0.35)), 0)
        bottle = SceneObject(1, "bottle", "blue",
                             Box((0.2, 0.2, 0.0), (0.34, 0.34, 0.6)), 0)
        rels = derive_relations([crate, bottle], {})
        assert [(r.subject_index, r.relation, r.object_index) for r in rels] \
            == [(1, "contained_in", 0)]

    def test_tag_overrides_geometry(self):
        sofa = SceneObject(0, "sofa", "red", Box((0, 0, 0), (1.4, 0.8, 0.75)), 0)
        cushion = SceneObject(1, "cushion", "blue",
                              Box((0.2, 0.2, 0.75), (0.65, 0.4, 1.15)), 0)
        rels = derive_relations([sofa, cushion], {(1, 0): "subpart_of"})
        assert [(r.subject_index, r.relation, r.object_index) for r in rels] \
            == [(1, "subpart_of", 0)]

    def test_separated_objects_unrelated(self):
        a = SceneObject(0, "chair", "red", Box((0, 0, 0), (0.5, 0.5, 0.9)), 0)
        b = SceneObject(1, "plant", "blue", Box((2, 2, 0), (2.4, 2.4, 0.8)), 0)
        assert derive_relations([a, b], {}) == []


class TestGeneratorGuarantees:
    def test_every_object_visible_somewhere(self, small_scene):
        seen = set()
        for fid in range(small_scene.frame_count):
            seen.update(small_scene.visible_objects(fid))
        assert seen == {o.index for o in small_scene.objects}

    def test_related_pairs_covisible_on_discovery_frames(self, small_scene):
        ok = set()
        for fid in range(0, small_scene.frame_count, 3):
            visible = set(small_scene.visible_objects(fid))
            for rel in small_scene.relations:
                if rel.subject_index in visible and rel.object_index in visible:
                    ok.add((rel.subject_index, rel.object_index))
        assert ok == {(r.subject_index, r.object_index)
                      for r in small_scene.relations}

    def test_captions_unique(self, small_scene):
        captions = [o.caption for o in small_scene.objects]
        assert len(captions) == len(set(captions))

    def test_overflow_spec_rejected(self):
        with pytest.raises(GenerationError):
            generate_scene(1, 7, seed=0)

    def test_acceptance_scale_scenes_generate(self):
        for seed in range(20):
            rooms = 2 + seed % 3
            opr = 2 + (seed % 2 if rooms < 4 else 0)
            scene = generate_scene(rooms, opr, seed=seed)
            assert 4 <= len(scene.objects) <= 10

    def test_gt_masks_consistent_with_bbox(self, small_scene):
        for det in small_scene.gt_detections(0):
            u0, v0, u1, v1 = det.bbox
            for v, us, ue in det.mask_runs:
                assert v0 <= v <= v1
                assert u0 <= us <= ue <= u1


class TestQuestions:
    def test_answers_from_truth(self, small_scene):
        questions = generate_questions(small_scene)
        by_cat = {}
        for q in questions:
            by_cat.setdefault(q.category, []).append(q)
        assert set(by_cat) == {"spatial", "localization", "attribute", "counting"}
        count_q = by_cat["counting"][0]
        assert count_q.answer == str(len(small_scene.objects))
        for q in by_cat["spatial"]:
            assert any(o.caption == q.answer for o in small_scene.objects)

    def test_question_file_round_trip(self, small_scene, tmp_path):
        questions = generate_questions(small_scene)
        save_questions(questions, tmp_path / "q.json")
        assert load_questions(tmp_path / "q.json") == questions
