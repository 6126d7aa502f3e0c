import itertools
import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pickhtp.errors import DecompositionError, DetectionParseError, ValidationError
from pickhtp.geometry import (
    BoundingBox,
    Detection,
    Level,
    SubDrawing,
    annotate_focus,
    build_multi_object_views,
    build_single_object_views,
    candidate_groups,
    clamp_box,
    decompose,
    dedupe_boxes,
    load_detections,
    load_image,
    overlap_over_smaller,
    union_box,
)


def det(label, box, score=0.9):
    return Detection(BoundingBox(*box), label, score)


def write_json(tmp_path, data, name="dets.json"):
    p = tmp_path / name
    p.write_text(data if isinstance(data, str) else json.dumps(data))
    return p


class TestLoadDetections:
    def test_single_main_record(self, tmp_path):
        dets = load_detections(write_json(tmp_path, [{"label": "house", "box": [10, 10, 60, 80], "score": 0.92}]))
        assert len(dets) == 1
        assert dets[0].is_main
        assert dets[0].box == BoundingBox(10, 10, 60, 80)

    def test_other_element_is_not_main(self, tmp_path):
        dets = load_detections(write_json(tmp_path, [{"label": "sun", "box": [0, 0, 5, 5], "score": 0.5}]))
        assert not dets[0].is_main

    def test_main_classification_case_insensitive(self):
        assert det("Tree", (0, 0, 1, 1)).is_main
        assert det("PERSON", (0, 0, 1, 1)).is_main
        assert not det("flower", (0, 0, 1, 1)).is_main

    def test_zero_width_box_names_index(self, tmp_path):
        data = [{"label": "tree", "box": [0, 0, 5, 5], "score": 0.5}, {"label": "house", "box": [50, 50, 50, 90], "score": 0.9}]
        with pytest.raises(ValidationError, match="detection 1"):
            load_detections(write_json(tmp_path, data))

    def test_malformed_json_names_line(self, tmp_path):
        with pytest.raises(DetectionParseError, match="line 3"):
            load_detections(write_json(tmp_path, '[\n{"label": "house",\n "box": [1,2,3,4] "score": 1}\n]'))

    def test_score_out_of_range(self, tmp_path):
        with pytest.raises(ValidationError, match="detection 0"):
            load_detections(write_json(tmp_path, [{"label": "house", "box": [0, 0, 5, 5], "score": 1.5}]))


class TestOverlap:
    def test_identical(self):
        assert overlap_over_smaller(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert overlap_over_smaller(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30)) == 0.0

    def test_half(self):
        # intersection 5 x 10 = 50 over smaller area 100
        assert overlap_over_smaller(BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 15, 10)) == pytest.approx(0.5)

    def test_touching_edges_do_not_overlap(self):
        assert overlap_over_smaller(BoundingBox(0, 0, 10, 10), BoundingBox(10, 0, 20, 10)) == 0.0


boxes = st.builds(
    lambda x, y, w, h: BoundingBox(x, y, x + w, y + h),
    st.integers(0, 100), st.integers(0, 100), st.integers(1, 60), st.integers(1, 60),
)


@settings(max_examples=300)
@given(a=boxes, b=boxes)
def test_overlap_symmetric_and_bounded(a, b):
    o = overlap_over_smaller(a, b)
    assert o == overlap_over_smaller(b, a)
    assert 0.0 <= o <= 1.0
    smaller, larger = sorted((a, b), key=lambda x: x.area)
    if larger.contains(smaller):
        assert o == 1.0
    if o == 1.0:
        assert larger.contains(smaller)


@settings(max_examples=200)
@given(bs=st.lists(boxes, min_size=1, max_size=5))
def test_union_contains_members(bs):
    u = bs[0]
    for b in bs[1:]:
        u = u.union(b)
    assert all(u.contains(b) for b in bs)


class TestSingleViews:
    def test_disjoint_neighbor_excluded(self):
        views = build_single_object_views([det("house", (10, 10, 60, 80))], [det("sun", (80, 0, 99, 15))], "img")
        assert len(views) == 1
        assert views[0].neighbor_labels == ()

    def test_overlapping_neighbor_included(self):
        # intersection (40..50)^2 = 100 > 0
        views = build_single_object_views([det("tree", (0, 0, 50, 50))], [det("flower", (40, 40, 60, 60))], "img")
        assert views[0].neighbor_labels == ("flower",)

    def test_one_view_per_main(self):
        mains = [det("house", (0, 0, 10, 10)), det("tree", (20, 0, 30, 10)), det("person", (40, 0, 50, 10))]
        views = build_single_object_views(mains, [], "img")
        assert [v.main_object_labels for v in views] == [("house",), ("person",), ("tree",)]
        assert all(v.level is Level.SINGLE_OBJECT for v in views)

    def test_no_mains_is_an_error(self):
        with pytest.raises(DecompositionError, match="no main objects detected"):
            build_single_object_views([], [det("sun", (0, 0, 1, 1))], "img")


def brute_force_dedupe_ok(boxes, kept, threshold=0.9):
    """Kept set is pairwise below threshold and every dropped box collides with an earlier kept one."""
    for i, j in itertools.combinations(kept, 2):
        if overlap_over_smaller(boxes[i], boxes[j]) > threshold:
            return False
    for d in set(range(len(boxes))) - set(kept):
        if not any(k < d and overlap_over_smaller(boxes[d], boxes[k]) > threshold for k in kept):
            return False
    return sorted(kept) == list(kept)


class TestMultiViews:
    def test_pair_union(self):
        views = build_multi_object_views([det("house", (0, 0, 10, 10)), det("tree", (20, 0, 30, 10))], "img")
        assert len(views) == 1
        assert views[0].focus_box == BoundingBox(0, 0, 30, 10)
        assert views[0].main_object_labels == ("house", "tree")

    def test_single_main_gives_no_multis(self):
        assert build_multi_object_views([det("house", (0, 0, 10, 10))], "img") == []

    def test_pair_nearly_equal_to_full_group_is_dropped(self):
        # house + tree span almost the whole drawing; the person sits inside that span
        mains = [det("house", (0, 0, 40, 100)), det("tree", (60, 0, 100, 100)), det("person", (45, 40, 55, 95))]
        groups = candidate_groups(mains)
        full = groups[0]
        assert len(full) == 3
        views = build_multi_object_views(mains, "img")
        assert len(views) == 1
        assert views[0].main_object_labels == tuple(d.label for d in full)
        assert views[0].focus_box == BoundingBox(0, 0, 100, 100)

    def test_iou_metric_keeps_distinct_pairs(self):
        mains = [det("house", (0, 0, 40, 100)), det("tree", (60, 0, 100, 100)), det("person", (45, 40, 55, 95))]
        views = build_multi_object_views(mains, "img", metric="iou")
        # full group (0,0,100,100) vs house+tree pair has IoU 1.0 -> dropped; the two narrow pairs survive
        assert [v.main_object_labels for v in views] == [("house", "person", "tree"), ("house", "person"), ("person", "tree")]

    def test_views_contain_member_boxes(self):
        mains = [det("house", (0, 10, 30, 50)), det("tree", (50, 0, 70, 90)), det("person", (80, 60, 95, 99)),
                 det("house", (10, 60, 30, 95))]
        unions = []
        for group in candidate_groups(mains):
            u = union_box(d.box for d in group)
            assert all(u.contains(d.box) for d in group)
            unions.append(u)
        for v in build_multi_object_views(mains, "img"):
            assert v.focus_box in unions

    @settings(max_examples=200)
    @given(bs=st.lists(boxes, min_size=1, max_size=8))
    def test_dedupe_matches_brute_force(self, bs):
        kept = dedupe_boxes(bs)
        assert brute_force_dedupe_ok(bs, kept)
        assert dedupe_boxes([bs[i] for i in kept]) == list(range(len(kept)))


class TestDecompose:
    def test_counts_and_whole(self):
        dets = [det("house", (0, 40, 30, 90)), det("tree", (35, 10, 65, 90)), det("sun", (80, 0, 99, 10))]
        res = decompose(dets, "img")
        assert res.n_single == 2
        assert res.n_multi == 1
        assert res.whole.level is Level.WHOLE
        assert res.whole.focus_box is None and res.whole.neighbor_labels == ()

    def test_order_independent(self):
        dets = [det("house", (0, 40, 30, 90)), det("tree", (35, 10, 65, 90)), det("person", (70, 50, 90, 95)),
                det("flower", (25, 80, 40, 99)), det("house", (60, 0, 80, 20))]
        base = decompose(dets, "img")
        rng = random.Random(0)
        for _ in range(10):
            shuffled = dets[:]
            rng.shuffle(shuffled)
            assert decompose(shuffled, "img") == base

    def test_subdrawing_invariants(self):
        with pytest.raises(ValidationError):
            SubDrawing(Level.MULTI_OBJECT, "img", BoundingBox(0, 0, 1, 1), ("house",))
        with pytest.raises(ValidationError):
            SubDrawing(Level.WHOLE, "img", BoundingBox(0, 0, 1, 1))


class TestAnnotate:
    def test_perimeter_is_green(self):
        img = Image.new("RGB", (100, 100), (255, 255, 255))
        out = np.array(annotate_focus(img, BoundingBox(10, 10, 50, 50)))
        green = [0, 255, 0]
        for x in range(10, 51):
            assert out[10, x].tolist() == green and out[50, x].tolist() == green
        for y in range(10, 51):
            assert out[y, 10].tolist() == green and out[y, 50].tolist() == green
        assert out[12, 30].tolist() == green  # third stroke row
        assert out[13, 30].tolist() == [255, 255, 255]
        assert out[30, 30].tolist() == [255, 255, 255]
        assert out[5, 5].tolist() == [255, 255, 255]

    def test_input_untouched(self):
        img = Image.new("RGB", (20, 20), (255, 255, 255))
        before = img.tobytes()
        annotate_focus(img, BoundingBox(2, 2, 10, 10))
        assert img.tobytes() == before

    def test_clamped_to_bounds(self):
        assert clamp_box(BoundingBox(90, 90, 120, 120), 100, 100) == (90, 90, 99, 99)
        out = np.array(annotate_focus(Image.new("RGB", (100, 100), (255, 255, 255)), BoundingBox(90, 90, 120, 120)))
        assert out[99, 95].tolist() == [0, 255, 0]
        assert out[95, 99].tolist() == [0, 255, 0]

    def test_deterministic(self):
        img = Image.new("RGB", (64, 48), (200, 100, 50))
        a = annotate_focus(img, BoundingBox(3, 4, 40, 30)).tobytes()
        b = annotate_focus(img, BoundingBox(3, 4, 40, 30)).tobytes()
        assert a == b

    def test_unreadable_image(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(OSError):
            load_image(bad)
