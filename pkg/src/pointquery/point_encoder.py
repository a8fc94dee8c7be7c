"""Turn point annotations into decoder object queries.

A query is the sum of a fixed sinusoidal encoding of the point location and
a learnable embedding looked up by category index. The sinusoid is the same
function that produces the encoder's spatial positional map, evaluated at
the point instead of at feature-cell centres.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import Tensor, nn

from .geometry import PointAnnotation

__all__ = ["positional_encoding", "grid_positional_map", "PointEncoder"]


def _axis_encoding(coord: Tensor, num_feats: int, temperature: float) -> Tensor:
    # entries 2k and 2k+1 share a frequency: [sin f0, cos f0, sin f1, cos f1, ...]
    idx = torch.arange(num_feats, dtype=coord.dtype, device=coord.device)
    dim_t = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / num_feats)
    angle = coord[..., None] * (2 * math.pi) / dim_t
    out = torch.empty_like(angle)
    out[..., 0::2] = angle[..., 0::2].sin()
    out[..., 1::2] = angle[..., 1::2].cos()
    return out


def positional_encoding(x, y, d_model: int, temperature: float = 10000.0) -> Tensor:
    """Sinusoidal encoding of normalized coordinates.

    Accepts scalars or tensors of matching shape and returns ``(..., d_model)``:
    the first half encodes ``x``, the second half ``y``.
    """
    if d_model % 4:
        raise ValueError(f"d_model must be divisible by 4, got {d_model}")
    x = torch.as_tensor(x, dtype=torch.get_default_dtype())
    y = torch.as_tensor(y, dtype=x.dtype)
    half = d_model // 2
    return torch.cat([_axis_encoding(x, half, temperature), _axis_encoding(y, half, temperature)], dim=-1)


def grid_positional_map(height: int, width: int, d_model: int, temperature: float = 10000.0) -> Tensor:
    """Encoding of every feature-cell centre, shape ``(height * width, d_model)`` in row-major order."""
    ys = (torch.arange(height, dtype=torch.get_default_dtype()) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.get_default_dtype()) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return positional_encoding(gx.reshape(-1), gy.reshape(-1), d_model, temperature)


class PointEncoder(nn.Module):
    """Point location + category -> object query.

    ``use_position`` / ``use_category`` switch off either summand for
    ablations; a disabled summand contributes zeros.
    """

    def __init__(
        self,
        d_model: int,
        num_categories: int,
        temperature: float = 10000.0,
        use_position: bool = True,
        use_category: bool = True,
        init_std: float = 0.02,
    ):
        super().__init__()
        if d_model % 4:
            raise ValueError(f"d_model must be divisible by 4, got {d_model}")
        self.d_model = d_model
        self.num_categories = num_categories
        self.temperature = temperature
        self.use_position = use_position
        self.use_category = use_category
        self.category_table = nn.Embedding(num_categories, d_model)
        nn.init.normal_(self.category_table.weight, std=init_std)

    def positional_encoding(self, x, y) -> Tensor:
        return positional_encoding(x, y, self.d_model, self.temperature).to(self.category_table.weight)

    def category_embedding(self, c) -> Tensor:
        c = torch.as_tensor(c, dtype=torch.long, device=self.category_table.weight.device)
        if c.numel() and (int(c.min()) < 0 or int(c.max()) >= self.num_categories):
            raise IndexError(f"category index out of range [0, {self.num_categories})")
        return self.category_table(c)

    def forward(self, xy: Tensor, categories: Tensor) -> Tensor:
        """``xy``: (..., 2) normalized points; ``categories``: (...) int64."""
        out = torch.zeros(*xy.shape[:-1], self.d_model, dtype=self.category_table.weight.dtype, device=xy.device)
        if self.use_position:
            out = out + self.positional_encoding(xy[..., 0], xy[..., 1])
        if self.use_category:
            out = out + self.category_embedding(categories)
        return out

    def encode_points(self, points: Sequence[PointAnnotation]) -> Tensor:
        """One query row per point, in input order; ``(0, d_model)`` for no points."""
        if len(points) == 0:
            return torch.zeros(0, self.d_model, dtype=self.category_table.weight.dtype)
        xy = torch.tensor([[p[0], p[1]] for p in points], dtype=self.category_table.weight.dtype)
        cats = torch.tensor([int(p[2]) for p in points], dtype=torch.long)
        return self(xy, cats)
