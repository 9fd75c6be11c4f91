import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from defyolo.data import formats as F
from defyolo.data.synth import (REFERENCE_INSTANCES, SynthSceneConfig, contrast_stats, quota,
                                split_counts, synth_dataset, write_dataset)
from defyolo.data.transforms import (PAD_VALUE, hflip, intensity_jitter, letterbox,
                                     letterbox_boxes, read_gray, to_model_input, write_gray)

W, H = 640, 480


def one_image(boxes=()):
    return F.AnnotationSet([F.ImageInfo(0, "a.png", W, H)],
                           [F.BoxAnnotation(0, c, b) for c, b in boxes])


def random_corpus(rng, n_boxes=1000, n_images=50):
    images = [F.ImageInfo(i, f"{i:04d}.png", int(rng.integers(200, 900)), int(rng.integers(200, 700)))
              for i in range(n_images)]
    boxes = []
    for k in range(n_boxes):
        im = images[k % n_images]
        x1, y1 = rng.uniform(0, im.width - 20), rng.uniform(0, im.height - 20)
        x2, y2 = rng.uniform(x1 + 2, im.width), rng.uniform(y1 + 2, im.height)
        boxes.append(F.BoxAnnotation(im.id, int(rng.integers(0, 4)), (x1, y1, x2, y2)))
    return F.AnnotationSet(images, boxes)


def assert_same_boxes(a, b, tol):
    assert len(a.boxes) == len(b.boxes)
    key = lambda bx: (bx.image_id, bx.box[0], bx.box[1])
    for p, q in zip(sorted(a.boxes, key=key), sorted(b.boxes, key=key)):
        assert p.image_id == q.image_id and p.class_id == q.class_id
        assert np.max(np.abs(np.subtract(p.box, q.box))) <= tol


# ---- YOLO ------------------------------------------------------------------

def test_yolo_parse_example(tmp_path):
    (tmp_path / "a.txt").write_text("2 0.5 0.5 0.25 0.5\n")
    aset = F.parse_yolo(tmp_path, images=[F.ImageInfo(0, "a.png", W, H)])
    assert aset.boxes[0].class_id == 2
    assert aset.boxes[0].box == (240.0, 120.0, 400.0, 360.0)


def test_yolo_empty_file_is_valid(tmp_path):
    (tmp_path / "a.txt").write_text("")
    aset = F.parse_yolo(tmp_path, images=[F.ImageInfo(0, "a.png", W, H)])
    assert aset.boxes == [] and len(aset.images) == 1


@pytest.mark.parametrize("line,msg", [
    ("2 0.5 0.5 0.25", "a.txt:2"),
    ("x 0.5 0.5 0.25 0.5", "malformed"),
    ("1 1.5 0.5 0.25 0.5", "outside"),
    ("7 0.5 0.5 0.25 0.5", "class id"),
])
def test_yolo_errors_name_file_and_line(tmp_path, line, msg):
    (tmp_path / "a.txt").write_text("0 0.5 0.5 0.1 0.1\n" + line + "\n")
    with pytest.raises(F.AnnotationError, match=msg):
        F.parse_yolo(tmp_path, images=[F.ImageInfo(0, "a.png", W, H)])


def test_yolo_reads_sizes_from_images(tmp_path):
    (tmp_path / "images").mkdir()
    Image.fromarray(np.zeros((H, W), np.uint8)).save(tmp_path / "images" / "a.png")
    (tmp_path / "labels").mkdir()
    (tmp_path / "labels" / "a.txt").write_text("1 0.5 0.5 0.5 0.5\n")
    aset = F.parse_yolo(tmp_path / "labels")
    assert aset.images[0].width == W and aset.boxes[0].box == (160.0, 120.0, 480.0, 360.0)


# ---- COCO / VOC ------------------------------------------------------------

def test_coco_bbox_convention(tmp_path):
    F.write_coco(one_image([(1, (240, 120, 400, 360))]), tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["annotations"][0]["bbox"] == [240, 120, 160, 240]
    assert F.parse_coco(tmp_path / "c.json").boxes[0].box == (240, 120, 400, 360)


def test_coco_category_remap_and_errors(tmp_path):
    doc = {"images": [{"id": 7, "file_name": "a.png", "width": W, "height": H}],
           "categories": [{"id": 42, "name": "Scissors"}],
           "annotations": [{"image_id": 7, "category_id": 42, "bbox": [1, 2, 3, 4]}]}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert F.parse_coco(tmp_path / "c.json").boxes[0].class_id == 3
    doc["categories"][0]["name"] = "rifle"
    (tmp_path / "u.json").write_text(json.dumps(doc))
    with pytest.raises(F.AnnotationError, match="rifle"):
        F.parse_coco(tmp_path / "u.json")
    doc["categories"][0]["name"] = "gun"
    doc["annotations"][0]["image_id"] = 8
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(F.AnnotationError):
        F.parse_coco(tmp_path / "m.json")
    (tmp_path / "s.json").write_text("[]")
    with pytest.raises(F.AnnotationError):
        F.parse_coco(tmp_path / "s.json")


def test_voc_one_based_corners(tmp_path):
    F.write_voc(one_image([(0, (10, 20, 110, 220))]), tmp_path)
    xml = (tmp_path / "a.xml").read_text()
    assert "<xmin>11</xmin>" in xml and "<ymin>21</ymin>" in xml and "<xmax>110</xmax>" in xml
    assert F.parse_voc(tmp_path).boxes[0].box == (10.0, 20.0, 110.0, 220.0)


def test_three_way_round_trip_1000_boxes(tmp_path):
    src = random_corpus(np.random.default_rng(0))
    F.write_coco(src, tmp_path / "a.json")
    a = F.parse_coco(tmp_path / "a.json")
    F.write_yolo(a, tmp_path / "yolo")
    b = F.parse_yolo(tmp_path / "yolo", images=a.images)
    F.write_voc(b, tmp_path / "voc")
    c = F.parse_voc(tmp_path / "voc")
    F.write_coco(c, tmp_path / "b.json")
    d = F.parse_coco(tmp_path / "b.json")
    assert_same_boxes(src, d, 1.0)
    for fmt in F.FORMATS:
        path = tmp_path / ("x.json" if fmt == "coco" else fmt + "_x")
        F.write_annotations(fmt, src, path)
        back = F.read_annotations(fmt, path) if fmt != "yolo" else F.parse_yolo(path, src.images)
        assert_same_boxes(src, back, 1.0)


def test_validate():
    one_image([(0, (0, 0, 640, 480))]).validate()
    with pytest.raises(F.AnnotationError):
        one_image([(0, (0, 0, 641, 480))]).validate()
    with pytest.raises(F.AnnotationError):
        one_image([(5, (0, 0, 10, 10))]).validate()


# ---- transforms ------------------------------------------------------------

@pytest.mark.parametrize("w,h,scale,pad", [(640, 480, 1.0, (0, 80)), (320, 240, 2.0, (0, 80)),
                                           (500, 500, 1.28, (0, 0)), (480, 640, 1.0, (80, 0))])
def test_letterbox_geometry(w, h, scale, pad):
    img = np.full((h, w), 200, np.uint8)
    out, t = letterbox(img)
    assert out.shape == (640, 640)
    assert t.scale == pytest.approx(scale) and tuple(t.pad) == pad
    if pad[1]:
        assert (out[:pad[1]] == PAD_VALUE).all() and (out[-pad[1]:] == PAD_VALUE).all()
        assert (out[pad[1]:-pad[1]] == 200).all()


def test_letterbox_points_round_trip():
    rng = np.random.default_rng(0)
    for w, h in ((640, 480), (333, 517), (1000, 90)):
        _, t = letterbox(np.zeros((h, w), np.uint8))
        pts = rng.uniform(0, 1, size=(1000, 2)) * [w, h]
        np.testing.assert_allclose(t.to_original(t.to_model(pts)), pts, atol=0.5)
        b = np.array([[10.0, 20.0, 100.0, 60.0]])
        np.testing.assert_allclose(t.to_original(letterbox_boxes(b, t)), b, atol=0.5)


def test_hflip_properties():
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    boxes = np.array([[0.0, 0.0, 1.0, 2.0], [1.0, 0.0, 3.0, 3.0]])
    fi, fb = hflip(img, boxes)
    np.testing.assert_array_equal(fi, img[:, ::-1])
    np.testing.assert_allclose(fb[0], [3.0, 0.0, 4.0, 2.0])
    np.testing.assert_allclose(fb[1], boxes[1])
    ii, bb = hflip(fi, fb)
    np.testing.assert_array_equal(ii, img)
    np.testing.assert_allclose(bb, boxes)


def test_jitter_and_model_input():
    img = np.full((8, 8), 100, np.uint8)
    out = intensity_jitter(img, np.random.default_rng(0))
    assert out.dtype == np.uint8 and out.shape == img.shape
    x = to_model_input([img, img])
    assert x.shape == (2, 3, 8, 8) and x.dtype == np.float32
    assert x.max() == pytest.approx(100 / 255)


def test_gray_io(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(7, 9), dtype=np.uint8)
    for name in ("a.png", "a.pgm"):
        write_gray(tmp_path / name, img)
        np.testing.assert_array_equal(read_gray(tmp_path / name), img)
    with pytest.raises(FileNotFoundError):
        read_gray(tmp_path / "missing.png")


# ---- synthetic scenes ----------------------------------------------------

@pytest.fixture(scope="module")
def synth():
    return synth_dataset(SynthSceneConfig(seed=3), (40, 5, 5))


def test_synth_deterministic(synth):
    again = synth_dataset(SynthSceneConfig(seed=3), (40, 5, 5))
    for s in synth.scenes:
        for a, b in zip(synth.scenes[s], again.scenes[s]):
            assert np.array_equal(a.image, b.image) and a.boxes == b.boxes and a.labels == b.labels
    other = synth_dataset(SynthSceneConfig(seed=4), (2, 0, 0))
    assert not np.array_equal(other.scenes["train"][0].image, synth.scenes["train"][0].image)


def test_synth_boxes_are_tight(synth):
    for sc in synth.scenes["train"]:
        assert sc.image.shape == (480, 640) and sc.image.dtype == np.uint8
        for k, box in enumerate(sc.boxes):
            ys, xs = np.nonzero(sc.instance_mask == k + 1)
            assert box == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_synth_contrast_audit(synth):
    cfg = synth.config
    for split in synth.scenes:
        for sc in synth.scenes[split]:
            for box in sc.boxes:
                inside, ring = contrast_stats(sc.image, box, sc.body_mask, sc.instance_mask)
                assert inside <= ring - cfg.delta


def test_synth_class_mix_within_ten_percent():
    ds = synth_dataset(SynthSceneConfig(seed=0), 100)
    counts = ds.class_counts()
    want = np.array(REFERENCE_INSTANCES) / sum(REFERENCE_INSTANCES)
    got = counts / counts.sum()
    assert np.all(np.abs(got - want) <= 0.1 * want)


def test_split_and_quota():
    assert split_counts(6000) == (4800, 600, 600)
    q = quota(10, (1, 1, 2))
    assert q.sum() == 10 and q.tolist() == [3, 2, 5] or q.tolist() == [2, 3, 5]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.lists(st.floats(0.01, 10), min_size=2, max_size=6))
def test_quota_largest_remainder(total, weights):
    q = quota(total, weights)
    exact = np.array(weights) / sum(weights) * total
    assert q.sum() == total
    assert np.all(np.abs(q - exact) < 1)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthSceneConfig(seed=0, delta=0)
    with pytest.raises(ValueError):
        synth_dataset(SynthSceneConfig(seed=0), (0, 0, 0))


def test_write_dataset_layout(tmp_path):
    ds = synth_dataset(SynthSceneConfig(seed=1), (3, 1, 1))
    root = write_dataset(ds, tmp_path / "d")
    assert (root / "train.txt").read_text().splitlines()[0] == "train/images/000000.png"
    aset = F.parse_yolo(root / "train" / "labels")
    ref = ds.annotations("train")
    assert_same_boxes(ref, aset, 0.01)
    meta = json.loads((root / "dataset.json").read_text())
    assert meta["splits"] == {"train": 3, "val": 1, "test": 1}
