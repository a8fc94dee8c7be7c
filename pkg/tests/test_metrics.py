import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointquery.detector import Detection
from pointquery.geometry import Box
from pointquery.metrics import (
    EvalParams,
    area_ranges,
    coco_eval,
    instance_recall,
    pseudo_miou,
    tide_diagnose,
)

from oracles import brute_force_metrics, hand_built_cases, random_box, random_micro_case

G1 = (0.1, 0.1, 0.3, 0.3)  # medium
G2 = (0.5, 0.5, 0.9, 0.9)  # large


def _dets(items):
    return [Detection(Box(*b), c, s) for b, c, s in items]


def test_area_buckets():
    a = area_ranges(256)
    assert a["small"][1] == pytest.approx(1 / 64)
    assert a["large"][0] == pytest.approx(9 / 64)


@pytest.mark.parametrize("case", hand_built_cases(), ids=lambda c: c[0])
def test_hand_built(case):
    _, d, g, expected = case
    dets = {i: _dets(v) for i, v in d.items()}
    gt = {i: ([b for b, _ in v], [c for _, c in v]) for i, v in g.items()}
    r = coco_eval(dets, gt).to_dict()
    for k, v in expected.items():
        assert r[k] == pytest.approx(v, abs=1e-12), k
    oracle = brute_force_metrics(d, g, area_ranges())
    for k, v in oracle.items():
        assert r[k] == pytest.approx(v, abs=1e-12), k


def test_empty_bucket_reports_minus_one():
    r = coco_eval({0: _dets([(G1, 0, 0.5)])}, {0: ([G1], [0])})
    assert r.APs == -1.0 and r.APl == -1.0 and r.APm == 1.0


def test_category_without_gt_is_excluded():
    dets = {0: _dets([(G1, 0, 0.9), (G2, 3, 0.8)])}
    r = coco_eval(dets, {0: ([G1], [0])})
    assert r.AP50 == 1.0


def test_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(2024)
    areas = area_ranges()
    for _ in range(60):
        d, g = random_micro_case(rng)
        dets = {i: _dets(v) for i, v in d.items()}
        gt = {i: ([b for b, _ in v], [c for _, c in v]) for i, v in g.items()}
        ours = coco_eval(dets, gt, EvalParams(areas=areas)).to_dict()
        ref = brute_force_metrics(d, g, areas)
        for k in ref:
            assert ours[k] == pytest.approx(ref[k], abs=1e-9), k


# -- TIDE --------------------------------------------------------------------


def test_tide_perfect():
    dets = {0: _dets([(G1, 0, 0.9), (G2, 1, 0.8)])}
    p = tide_diagnose(dets, {0: ([G1, G2], [0, 1])})
    assert all(v == 0 for v in p.counts.values())
    assert p.num_fp == 0 and p.num_tp == 2 and p.base_ap50 == 1.0


def test_tide_single_background():
    p = tide_diagnose({0: _dets([(G1, 0, 0.9)])}, {0: (np.zeros((0, 4)), [])})
    assert p.counts == {"Cls": 0, "Loc": 0, "Both": 0, "Dupe": 0, "Bkg": 1, "Miss": 0}


def test_tide_single_duplicate():
    p = tide_diagnose({0: _dets([(G1, 0, 0.9), (G1, 0, 0.4)])}, {0: ([G1], [0])})
    assert p.counts["Dupe"] == 1
    assert sum(p.counts.values()) == 1


def test_tide_each_error_type():
    gt = {0: ([(0.0, 0.0, 0.4, 0.4), (0.6, 0.6, 1.0, 1.0)], [0, 1])}
    dets = {
        0: _dets(
            [
                ((0.0, 0.0, 0.4, 0.4), 1, 0.9),  # Cls
                ((0.6, 0.6, 0.85, 0.85), 1, 0.8),  # Loc (IoU 0.39)
                ((0.0, 0.0, 0.2, 0.2), 2, 0.7),  # Both (IoU 0.25)
                ((0.45, 0.0, 0.55, 0.1), 0, 0.6),  # Bkg
            ]
        )
    }
    p = tide_diagnose(dets, gt)
    assert p.counts == {"Cls": 1, "Loc": 1, "Both": 1, "Dupe": 0, "Bkg": 1, "Miss": 0}
    assert p.delta_ap["Cls"] > 0 and p.delta_ap["Loc"] > 0


def test_tide_miss():
    p = tide_diagnose({0: []}, {0: ([G1, G2], [0, 0])})
    assert p.counts["Miss"] == 2 and p.num_fn == 2
    assert p.delta_ap["Miss"] == 0.0


def test_tide_partition_on_random_cases():
    rng = np.random.default_rng(5)
    for _ in range(100):
        d, g = random_micro_case(rng, max_det=10)
        dets = {i: _dets(v) for i, v in d.items()}
        gt = {i: ([b for b, _ in v], [c for _, c in v]) for i, v in g.items()}
        p = tide_diagnose(dets, gt)
        assert p.num_fp == sum(p.counts[k] for k in ("Cls", "Loc", "Both", "Dupe", "Bkg"))
        assert p.num_tp + p.num_fp == sum(len(v) for v in dets.values())
        assert p.counts["Miss"] <= p.num_fn


@settings(deadline=None, max_examples=60)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_adding_detection_never_increases_miss(seed, score):
    rng = np.random.default_rng(seed)
    d, g = random_micro_case(rng, n_img=1)
    gt = {i: ([b for b, _ in v], [c for _, c in v]) for i, v in g.items()}
    dets = {i: _dets(v) for i, v in d.items()}
    before = tide_diagnose(dets, gt).counts["Miss"]
    extra = Detection(Box(*random_box(rng, 0.05)), int(rng.integers(2)), score)
    after = tide_diagnose({0: dets[0] + [extra]}, gt).counts["Miss"]
    assert after <= before


# -- pseudo-box quality --------------------------------------------------------


def test_pseudo_miou_examples():
    gt = {("a", 0): G1, ("a", 1): G2}
    assert pseudo_miou(gt, gt) == 1.0
    assert pseudo_miou({k: (0.2, 0.2, 0.2, 0.2) for k in gt}, gt) == 0.0
    half = (0.1, 0.1, 0.3, 0.2)
    assert pseudo_miou({("a", 0): half, ("a", 1): G2}, gt) == pytest.approx(0.75)
    assert pseudo_miou({("a", 1): G2}, gt) == pytest.approx(0.5)
    with pytest.raises(KeyError):
        pseudo_miou({("b", 0): G1}, gt)


def test_instance_recall():
    gt = {0: ([G1, G2], [0, 1])}
    assert instance_recall({0: ([G1, G2], [0, 1])}, gt) == 1.0
    assert instance_recall({0: ([G1, G2], [1, 1])}, gt) == 0.5
    assert instance_recall({}, gt) == 0.0
