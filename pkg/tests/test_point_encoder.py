import itertools

import numpy as np
import pytest
import torch

from pointquery.geometry import PointAnnotation
from pointquery.point_encoder import PointEncoder, grid_positional_map, positional_encoding


@pytest.fixture
def enc():
    torch.manual_seed(0)
    return PointEncoder(d_model=64, num_categories=4)


def test_range_and_shape():
    xy = torch.rand(100, 2)
    pe = positional_encoding(xy[:, 0], xy[:, 1], 64)
    assert pe.shape == (100, 64)
    assert pe.abs().max() <= 1.0


def test_zero_angle_pattern():
    pe = positional_encoding(0.0, 0.0, 32)
    expected = torch.tensor([0.0, 1.0] * 16)
    assert torch.equal(pe, expected)


def test_matches_grid_map_at_cell_centres():
    h = w = 8
    grid = grid_positional_map(h, w, 64)
    for j, i in itertools.product(range(h), range(w)):
        pe = positional_encoding((i + 0.5) / w, (j + 0.5) / h, 64)
        assert torch.equal(pe, grid[j * w + i])


def test_injective_on_scene_grid():
    grid = grid_positional_map(64, 64, 64).double()
    d = torch.cdist(grid, grid)
    d.fill_diagonal_(np.inf)
    assert d.min() > 1e-3


def test_first_half_depends_only_on_x():
    a = positional_encoding(0.3, 0.1, 64)
    b = positional_encoding(0.3, 0.9, 64)
    assert torch.equal(a[:32], b[:32])
    assert not torch.equal(a[32:], b[32:])


def test_d_model_must_divide_by_four():
    with pytest.raises(ValueError):
        positional_encoding(0.1, 0.1, 30)
    with pytest.raises(ValueError):
        PointEncoder(30, 4)


def test_category_lookup(enc):
    assert torch.equal(enc.category_embedding(2), enc.category_embedding(2))
    with pytest.raises(IndexError):
        enc.category_embedding(4)
    with pytest.raises(IndexError):
        enc.category_embedding(-1)


def test_rows_distinct_after_init(enc):
    w = enc.category_table.weight.detach()
    d = torch.cdist(w, w)
    assert (d + torch.eye(4) > 0).all()


def test_encode_points_order_and_sum(enc):
    pts = [PointAnnotation(0.1, 0.2, 0), PointAnnotation(0.7, 0.4, 3), PointAnnotation(0.1, 0.2, 0)]
    q = enc.encode_points(pts)
    assert q.shape == (3, 64)
    assert torch.equal(q[0], q[2])
    for row, p in zip(q, pts):
        pos = enc.positional_encoding(p.x, p.y)
        assert torch.allclose(row - enc.category_embedding(p.category), pos, atol=1e-7)


def test_empty_points(enc):
    assert enc.encode_points([]).shape == (0, 64)


def test_ablation_switches():
    torch.manual_seed(0)
    pos_only = PointEncoder(64, 4, use_category=False)
    cat_only = PointEncoder(64, 4, use_position=False)
    a = pos_only.encode_points([PointAnnotation(0.2, 0.3, 0), PointAnnotation(0.2, 0.3, 1)])
    assert torch.equal(a[0], a[1])
    b = cat_only.encode_points([PointAnnotation(0.2, 0.3, 1), PointAnnotation(0.9, 0.8, 1)])
    assert torch.equal(b[0], b[1])


def test_gradients_reach_only_category_table(enc):
    xy = torch.rand(5, 2, requires_grad=True)
    cats = torch.tensor([0, 1, 2, 3, 0])
    enc(xy, cats).sum().backward()
    assert enc.category_table.weight.grad is not None
    assert enc.category_table.weight.grad.abs().sum() > 0
    assert [n for n, p in enc.named_parameters()] == ["category_table.weight"]
