import numpy as np
import pytest
import torch

from pointquery.detector import (
    Checkpoint,
    ModeError,
    ModelConfig,
    box_loss,
    build_model,
    decode_offsets_t,
    images_to_tensor,
    set_loss,
)
from pointquery.geometry import PointAnnotation, contains
from pointquery.geometry import giou as giou_scalar

from oracles import RasterOracle


def _image(seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(64, 64, 3), dtype=np.uint8)


def _points(n, seed=0):
    rng = np.random.default_rng(seed)
    return [PointAnnotation(float(x), float(y), int(c)) for x, y, c in zip(rng.random(n), rng.random(n), rng.integers(0, 4, n))]


@pytest.fixture(scope="module")
def point_model():
    return build_model(ModelConfig(), seed=0).eval()


@pytest.fixture(scope="module")
def set_model():
    return build_model(ModelConfig(mode="set"), seed=0).eval()


def test_backbone_shape_and_determinism(point_model):
    x = images_to_tensor([_image()])
    with torch.no_grad():
        a = point_model.backbone_forward(x)
        b = point_model.backbone_forward(x)
    assert a.shape[-2:] == (8, 8)
    assert torch.equal(a, b)


def test_backbone_rejects_wrong_size(point_model):
    with pytest.raises(ValueError):
        point_model.backbone_forward(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ValueError):
        images_to_tensor([np.zeros((32, 32, 3), np.uint8)], 64)


def test_zero_image_finite(point_model, set_model):
    img = np.zeros((64, 64, 3), np.uint8)
    _, boxes = point_model.point_detr_forward(img, _points(3))
    assert np.isfinite(np.array(boxes)).all()
    probs, sboxes = set_model.detr_forward(img)
    assert np.isfinite(probs).all() and np.isfinite(sboxes).all()


@pytest.mark.parametrize("n", [0, 1, 7, 50])
def test_point_cardinality_and_containment(point_model, n):
    pts = _points(n, seed=n)
    offs, boxes = point_model.point_detr_forward(_image(), pts)
    assert len(offs) == len(boxes) == n
    for p, o, b in zip(pts, offs, boxes):
        assert all(0.0 <= v <= 1.0 for v in o)
        assert contains(b, p.x, p.y)


def test_permutation_equivariance(point_model):
    pts = _points(9, seed=3)
    perm = np.random.default_rng(1).permutation(9)
    _, boxes = point_model.point_detr_forward(_image(2), pts)
    _, pboxes = point_model.point_detr_forward(_image(2), [pts[i] for i in perm])
    np.testing.assert_allclose(np.array(pboxes), np.array(boxes)[perm], atol=1e-6)


def test_mode_errors(point_model, set_model):
    with pytest.raises(ModeError):
        point_model.detr_forward(_image())
    with pytest.raises(ModeError):
        set_model.point_detr_forward(_image(), _points(2))


def test_detr_outputs(set_model):
    probs, boxes = set_model.detr_forward(_image(0))
    assert probs.shape == (25, 5) and boxes.shape == (25, 4)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)
    assert (boxes[:, 2] >= boxes[:, 0]).all() and (boxes[:, 3] >= boxes[:, 1]).all()
    _, other = set_model.detr_forward(_image(1))
    assert not np.allclose(boxes, other)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(mode="both")
    with pytest.raises(ValueError):
        ModelConfig(d_model=30)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    cfg = ModelConfig(d_model=32, nheads=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- losses ------------------------------------------------------------------


def _t(*b):
    return torch.tensor(b, dtype=torch.float64)


def test_box_loss_identity():
    b = _t(0.1, 0.2, 0.5, 0.7)
    assert box_loss(b, b).item() == pytest.approx(0.0, abs=1e-12)


def test_box_loss_shift_example():
    pred, target = (0.1, 0.0, 0.6, 0.5), (0.0, 0.0, 0.5, 0.5)
    _, g = RasterOracle(1000)(pred, target)
    got = box_loss(_t(*pred), _t(*target)).item()
    assert got == pytest.approx(1.0 + 2 * (1 - g), abs=5e-3)
    assert got == pytest.approx(1.0 + 2 * (1 - giou_scalar(pred, target)), abs=1e-12)


def test_box_loss_linear_in_l1_weight():
    p, t = _t(0.1, 0.1, 0.4, 0.5), _t(0.2, 0.0, 0.5, 0.6)
    base = box_loss(p, t, 0.0, 2.0)
    one = box_loss(p, t, 5.0, 2.0) - base
    two = box_loss(p, t, 10.0, 2.0) - base
    assert two.item() == pytest.approx(2 * one.item(), abs=1e-12)


def test_set_loss_empty_targets():
    logits = torch.randn(6, 5, dtype=torch.float64)
    got = set_loss(logits, torch.rand(6, 4), torch.zeros(0, dtype=torch.long), torch.zeros(0, 4), [])
    expected = -0.1 * torch.log_softmax(logits, -1)[:, 4].sum()
    assert got.item() == pytest.approx(expected.item(), abs=1e-12)


def test_set_loss_perfect_prediction():
    q = 5
    logits = torch.full((q, 5), -50.0, dtype=torch.float64)
    logits[:, 4] = 50.0
    logits[3] = torch.tensor([-50, -50, 50, -50, -50.0])
    corner = torch.rand(q, 2, dtype=torch.float64) * 0.5
    boxes = torch.cat([corner, corner + torch.tensor([0.2, 0.3])], -1)
    got = set_loss(logits, boxes, torch.tensor([2]), boxes[3:4].clone(), [3])
    assert got.item() == pytest.approx(0.0, abs=1e-9)


def test_set_loss_rejects_bad_assignment():
    logits, boxes = torch.randn(4, 5), torch.rand(4, 4)
    tc, tb = torch.tensor([0, 1]), torch.rand(2, 4)
    with pytest.raises(ValueError):
        set_loss(logits, boxes, tc, tb, [0, 0])
    with pytest.raises(ValueError):
        set_loss(logits, boxes, tc, tb, [0])
    with pytest.raises(ValueError):
        set_loss(logits, boxes, tc, tb, [0, 4])


def test_set_loss_decreases_toward_target():
    logits = torch.randn(4, 5, dtype=torch.float64)
    target = _t(0.2, 0.2, 0.6, 0.7)[None]
    start = _t(0.5, 0.4, 0.9, 0.95)
    prev = np.inf
    for a in np.linspace(0, 1, 11):
        boxes = torch.rand(4, 4, dtype=torch.float64)
        boxes[1] = (1 - a) * start + a * target[0]
        val = set_loss(logits, boxes, torch.tensor([1]), target, [1]).item()
        assert val < prev
        prev = val


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    done = 0
    while done < 20:
        xy = torch.tensor(rng.uniform(0.35, 0.65, 2))
        raw = torch.tensor(rng.uniform(-2.5, -0.8, 4), requires_grad=True)
        target = xy.repeat(2) + torch.tensor(rng.uniform(0.05, 0.3, 4)) * torch.tensor([-1, -1, 1, 1.0])

        def f(r):
            return box_loss(decode_offsets_t(xy, r.sigmoid()), target)

        f(raw).backward()
        h = 1e-6
        num = np.array([(f(raw.detach() + h * e) - f(raw.detach() - h * e)).item() / (2 * h) for e in torch.eye(4, dtype=torch.float64)])
        ana = raw.grad.numpy()
        assert np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12) < 1e-3
        done += 1


def test_checkpoint_roundtrip(tmp_path, point_model):
    ck = Checkpoint(point_model, {"epoch": 3, "seed": 1})
    path = ck.save(tmp_path / "m.pt")
    back = Checkpoint.load(path)
    assert back.meta == {"epoch": 3, "seed": 1}
    assert back.config == point_model.config
    pts = _points(4)
    np.testing.assert_array_equal(
        np.array(back.model.point_detr_forward(_image(), pts)[1]),
        np.array(point_model.point_detr_forward(_image(), pts)[1]),
    )
    path2 = Checkpoint(back.model, back.meta).save(tmp_path / "m2.pt")
    s1, s2 = torch.load(path, weights_only=True)["state_dict"], torch.load(path2, weights_only=True)["state_dict"]
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing checkpoint"):
        Checkpoint.load(tmp_path / "nope.pt")
