import json

import numpy as np
import pytest
from scipy import stats

from pointquery.geometry import contains
from pointquery.synth_data import (
    DataConfig,
    DatasetFormatError,
    Instance,
    PlacementError,
    ShapeSpec,
    annotate_points,
    generate_scene,
    generate_scenes,
    load_dataset,
    mask_to_box,
    rle_decode,
    rle_encode,
    sample_point,
    serialize_dataset,
    split_dataset,
)


def _scene_bytes(scene):
    parts = [scene.image.tobytes()]
    for inst in scene.instances:
        parts += [inst.mask.tobytes(), np.array(inst.box).tobytes(), bytes([inst.category])]
    return b"".join(parts)


def test_generation_deterministic():
    cfg = DataConfig()
    assert _scene_bytes(generate_scene(7, cfg)) == _scene_bytes(generate_scene(7, cfg))
    assert _scene_bytes(generate_scene(7, cfg)) != _scene_bytes(generate_scene(8, cfg))


def test_forced_count():
    cfg = DataConfig(min_n=1, max_n=1)
    for seed in range(10):
        assert len(generate_scene(seed, cfg).instances) == 1


def test_category_shares_uniform():
    scenes = generate_scenes(1000, DataConfig(), seed=11)
    cats = np.concatenate([s.categories for s in scenes])
    shares = np.bincount(cats, minlength=4) / len(cats)
    assert np.all(np.abs(shares - 0.25) <= 0.03), shares


def test_scene_invariants():
    cfg = DataConfig(min_n=2, max_n=5)
    for scene in generate_scenes(50, cfg, seed=3):
        assert cfg.min_n <= len(scene.instances) <= cfg.max_n
        assert scene.image.shape == (64, 64, 3) and scene.image.dtype == np.uint8
        for inst in scene.instances:
            assert inst.mask.any()
            assert inst.box.is_valid()
            assert tuple(inst.box) == tuple(mask_to_box(inst.mask))


def test_visible_only_masks_do_not_overlap_later_instances():
    cfg = DataConfig(min_n=3, max_n=4, visible_only=True, max_overlap=0.6)
    for scene in generate_scenes(30, cfg, seed=5):
        for i, inst in enumerate(scene.instances):
            for later in scene.instances[i + 1 :]:
                assert not (inst.mask & later.mask).any()


def test_impossible_placement_raises():
    big = (ShapeSpec("a", "rectangle", (0.9, 0.95), (1.0, 1.0)), ShapeSpec("b", "ellipse", (0.9, 0.95), (1.0, 1.0)))
    cfg = DataConfig(shapes=big, min_n=3, max_n=3, max_overlap=0.0, max_tries=5)
    with pytest.raises(PlacementError):
        generate_scene(0, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        generate_scene(0, DataConfig(canvas_size=16))
    with pytest.raises(ValueError):
        generate_scene(0, DataConfig(shapes=DataConfig().shapes[:1]))


def _rect_instance(x0, y0, x1, y1, n=64):
    mask = np.zeros((n, n), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return Instance(category=2, box=mask_to_box(mask), mask=mask)


def test_center_point():
    inst = _rect_instance(0, 0, 4, 4)
    inst.box = type(inst.box)(0.2, 0.2, 0.6, 0.8)
    p = sample_point(inst, "center", np.random.default_rng(0))
    assert (p.x, p.y, p.category) == pytest.approx((0.4, 0.5, 2))


def test_mask_points_on_ring_support():
    yy, xx = np.mgrid[0:64, 0:64]
    r = np.hypot(xx + 0.5 - 32, yy + 0.5 - 32)
    mask = (r <= 20) & (r >= 12)
    inst = Instance(category=3, box=mask_to_box(mask), mask=mask)
    rng = np.random.default_rng(1)
    for _ in range(500):
        p = sample_point(inst, "mask", rng)
        col, row = int(p.x * 64), int(p.y * 64)
        assert mask[row, col]
        assert inst.box.x1 < p.x < inst.box.x2 and inst.box.y1 < p.y < inst.box.y2


def test_mask_mode_matches_bbox_mode_on_full_rectangle():
    inst = _rect_instance(2, 4, 62, 60)
    rng = np.random.default_rng(2)
    m = np.array([sample_point(inst, "mask", rng)[:2] for _ in range(10_000)])
    b = np.array([sample_point(inst, "bbox", rng)[:2] for _ in range(10_000)])
    for axis in (0, 1):
        assert stats.ks_2samp(m[:, axis], b[:, axis]).pvalue > 0.01


def test_bbox_points_inside_box():
    inst = _rect_instance(10, 20, 30, 25)
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = sample_point(inst, "bbox", rng)
        assert contains(inst.box, p.x, p.y)


def test_unknown_mode():
    with pytest.raises(ValueError):
        sample_point(_rect_instance(0, 0, 2, 2), "corner", np.random.default_rng(0))


def test_split_examples():
    sp = split_dataset(range(100), 0.2, seed=4)
    assert len(sp.full_set) == 20 and len(sp.weak_set) == 80
    assert not set(sp.full_set) & set(sp.weak_set)
    assert set(sp.full_set) | set(sp.weak_set) == set(range(100))
    assert split_dataset(range(100), 0.2, seed=4) == sp
    with pytest.raises(ValueError):
        split_dataset(range(100), 0.005, seed=4)
    with pytest.raises(ValueError):
        split_dataset(range(100), 1.0, seed=4)


def test_split_prefix_chain():
    prev = set()
    for frac in (0.05, 0.1, 0.2, 0.3, 0.4, 0.5):
        full = set(split_dataset(range(200), frac, seed=9).full_set)
        assert prev <= full
        prev = full


def test_rle_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.random((17, 23)) < 0.3
        assert np.array_equal(rle_decode(rle_encode(m)), m)
    full = np.ones((4, 4), dtype=bool)
    assert rle_encode(full)["counts"][0] == 0
    assert np.array_equal(rle_decode(rle_encode(full)), full)


def test_serialize_roundtrip(tmp_path):
    cfg = DataConfig()
    scenes = generate_scenes(12, cfg, seed=1)
    pts = annotate_points(scenes, "bbox", seed=1)
    for s in scenes:
        for inst, p in zip(s.instances, pts[s.scene_id]):
            inst.point = p
    split = split_dataset([s.scene_id for s in scenes], 0.25, seed=1)
    serialize_dataset(scenes, split, tmp_path, cfg)
    loaded, split2 = load_dataset(tmp_path)
    assert split2 == split
    assert [s.scene_id for s in loaded] == [s.scene_id for s in scenes]
    for a, b in zip(scenes, loaded):
        assert np.array_equal(a.image, b.image)
        assert len(a.instances) == len(b.instances)
        for ia, ib in zip(a.instances, b.instances):
            assert tuple(ia.box) == tuple(ib.box)
            assert ia.category == ib.category
            assert np.array_equal(ia.mask, ib.mask)
            assert ib.point.x == pytest.approx(ia.point.x, abs=1e-12)
            assert ib.point.y == pytest.approx(ia.point.y, abs=1e-12)


def test_load_reports_offending_record(tmp_path):
    scenes = generate_scenes(2, DataConfig(), seed=0)
    serialize_dataset(scenes, None, tmp_path, DataConfig())
    doc = json.loads((tmp_path / "annotations.json").read_text())
    doc["annotations"][1]["category_id"] = 99
    (tmp_path / "annotations.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetFormatError, match="record 1"):
        load_dataset(tmp_path)
    del doc["annotations"][0]["bbox"]
    (tmp_path / "annotations.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetFormatError, match="record 0"):
        load_dataset(tmp_path)
