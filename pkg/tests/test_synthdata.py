import numpy as np
import pytest

from fen.evaluation import load_gt_dir
from fen.geometry import iou
from fen.synthdata import (Manifest, SceneSpec, box_to_int_corners, generate_scene, read_pgm,
                           render_dataset, scene_stem, write_pgm)


def test_deterministic():
    spec = SceneSpec()
    a, ba = generate_scene(spec, 7)
    b, bb = generate_scene(spec, 7)
    assert np.array_equal(a, b) and ba == bb
    c, _ = generate_scene(spec, 8)
    assert not np.array_equal(a, c)


def test_image_properties():
    img, boxes = generate_scene(SceneSpec(), 0)
    assert img.shape == (1, 128, 128)
    assert img.min() >= 0 and img.max() <= 1
    np.testing.assert_array_equal(np.round(img * 255) / 255, img)
    for b in boxes:
        x1, y1, x2, y2 = b.to_corners()
        assert 0 <= x1 < x2 <= 128 and 0 <= y1 < y2 <= 128


def test_overlap_bound_over_many_scenes():
    spec = SceneSpec()
    counts = np.zeros(5, dtype=int)
    for index in range(1000):
        _, boxes = generate_scene(spec, index)
        counts[len(boxes)] += 1
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert iou(boxes[i], boxes[j]) <= spec.max_overlap
    assert counts[0] == 0
    assert counts[4] > 0


def test_aspect_ratio_respected():
    spec = SceneSpec()
    for index in range(200):
        for b in generate_scene(spec, index)[1]:
            assert spec.aspect[0] - 0.5 <= b.w / b.h <= spec.aspect[1] + 0.5


def test_single_word():
    spec = SceneSpec(words=(1, 1))
    for index in range(20):
        assert len(generate_scene(spec, index)[1]) == 1


def test_invalid_spec():
    with pytest.raises(ValueError):
        SceneSpec(words=(0, 2))
    with pytest.raises(ValueError):
        SceneSpec(aspect=(0.5, 2.0))


def test_pgm_round_trip(tmp_path):
    img, _ = generate_scene(SceneSpec(), 3)
    write_pgm(tmp_path / "x.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "x.pgm")


def test_render_round_trip(tmp_path):
    spec = SceneSpec()
    manifest = render_dataset(spec, 10, tmp_path)
    assert len(manifest) == 10
    assert len(Manifest.read(tmp_path / "manifest.txt")) == 10
    gts = load_gt_dir(tmp_path / "gt")
    for index in range(10):
        img, boxes = generate_scene(spec, index)
        stem = scene_stem(index)
        np.testing.assert_array_equal(read_pgm(tmp_path / "images" / f"{stem}.pgm"), img)
        expect = [box_to_int_corners(b) for b in boxes]
        assert gts[stem].boxes.tolist() == [list(map(float, e)) for e in expect]


def test_render_empty(tmp_path):
    assert len(render_dataset(SceneSpec(), 0, tmp_path)) == 0
    assert (tmp_path / "manifest.txt").read_text() == ""
