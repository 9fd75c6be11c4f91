import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defyolo.loss import boxes_to_ltrb, make_anchor_points
from defyolo.postprocess import (Detection, LetterboxTransform, Postprocessor, box_to_distances,
                                 decode_dfl, distances_to_box, nms, nms_indices,
                                 read_detections_jsonl, unletterbox, write_detections_jsonl)

from oracles import iou_xyxy, nms_reference, random_nms_instance


def test_decode_dfl_uniform_and_peaked():
    assert np.allclose(decode_dfl(np.zeros((4, 16))), 7.5)
    z = np.zeros((1, 4, 16))
    z[..., 3] = 80
    np.testing.assert_allclose(decode_dfl(z), 3.0, atol=1e-12)


def test_decode_dfl_matches_expectation():
    z = np.random.default_rng(0).normal(scale=3, size=(50, 4, 16))
    p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    np.testing.assert_allclose(decode_dfl(z), (p * np.arange(16)).sum(-1), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100))
def test_decode_dfl_range(seed, scale):
    d = decode_dfl(np.random.default_rng(seed).normal(scale=scale, size=(8, 4, 16)))
    assert d.min() >= 0 and d.max() <= 15


def test_distances_to_box_examples():
    np.testing.assert_allclose(distances_to_box([4, 4], 8, [0.5] * 4), [0, 0, 8, 8])
    b = distances_to_box([4, 4], 8, [0, 0, 0, 0])
    assert b[0] == b[2] and b[1] == b[3]


def test_box_distance_round_trip():
    rng = np.random.default_rng(1)
    anc = make_anchor_points()
    idx = rng.integers(0, 8400, size=200)
    ltrb = rng.uniform(0, 15, size=(200, 4))
    c, s = anc.centers[idx], anc.strides[idx]
    boxes = distances_to_box(c, s, ltrb)
    np.testing.assert_allclose(box_to_distances(c, s, boxes), ltrb, atol=1e-6)
    from defyolo.loss import Anchors
    np.testing.assert_allclose(boxes_to_ltrb(boxes, Anchors(c, s)), ltrb, atol=1e-6)


def test_nms_examples():
    a = Detection(0, 0.9, (0, 0, 10, 10))
    b = Detection(0, 0.8, (0, 0, 10, 10))
    assert nms([a, b]) == [a]
    c = Detection(1, 0.8, (0, 0, 10, 10))
    assert nms([a, c]) == [a, c]
    assert nms([a, c], class_aware=False) == [a]
    assert nms([Detection(0, 0.1, (0, 0, 1, 1))]) == []


def test_nms_max_det():
    dets = [Detection(0, 0.5 + i / 100, (20 * i, 0, 20 * i + 10, 10)) for i in range(10)]
    assert len(nms(dets, max_det=4)) == 4


def test_nms_against_reference_50_boxes():
    rng = np.random.default_rng(11)
    boxes, scores, classes = random_nms_instance(rng, n=50)
    got = nms_indices(boxes, scores, classes, 0.45).tolist()
    assert got == nms_reference(boxes, scores, classes, 0.45)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.1, 0.9), st.booleans())
def test_nms_reference_and_antichain(seed, thr, aware):
    boxes, scores, classes = random_nms_instance(np.random.default_rng(seed))
    keep = nms_indices(boxes, scores, classes, thr, aware).tolist()
    assert keep == nms_reference(boxes, scores, classes, thr, aware)
    for i in keep:
        for j in keep:
            if i < j and (not aware or classes[i] == classes[j]):
                assert iou_xyxy(boxes[i], boxes[j]) <= thr


def test_unletterbox_examples():
    t = LetterboxTransform(1.0, (0, 80), (640, 480))
    out = unletterbox([Detection(0, 0.5, (10, 80, 50, 120))], t)
    assert out[0].box == (10.0, 0.0, 50.0, 40.0)
    out = unletterbox([Detection(0, 0.5, (-5, 60, 700, 700))], t)
    assert out[0].box == (0.0, 0.0, 640.0, 480.0)
    assert unletterbox([Detection(0, 0.5, (0, 0, 600, 70))], t) == []


def test_letterbox_transform_round_trip():
    rng = np.random.default_rng(2)
    t = LetterboxTransform(0.5, (0, 80), (1280, 960))
    b = rng.uniform(0, 900, size=(100, 4))
    np.testing.assert_allclose(t.to_original(t.to_model(b)), b, atol=0.5)


def test_postprocessor_deterministic_and_filters():
    rng = np.random.default_rng(3)
    heads = [rng.normal(size=(2, 68, s, s)) for s in (8, 4, 2)]
    post = Postprocessor(imgsz=64, conf=0.3)
    a, b = post(heads), post(heads)
    assert a == b
    for dets in a:
        assert all(d.confidence >= 0.3 for d in dets)
        confs = [d.confidence for d in dets]
        assert confs == sorted(confs, reverse=True)


def test_detections_jsonl_round_trip(tmp_path):
    recs = [("a.png", [Detection(1, 0.75, (1.0, 2.0, 3.0, 4.0))]), ("b.png", [])]
    write_detections_jsonl(tmp_path / "d.jsonl", recs)
    assert read_detections_jsonl(tmp_path / "d.jsonl") == recs
    (tmp_path / "bad.jsonl").write_text(json.dumps({"image_id": "x"}) + "\n")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_detections_jsonl(tmp_path / "bad.jsonl")
