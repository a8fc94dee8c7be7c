"""
Turning points into decoder queries
===================================

A point becomes a query by summing a fixed sinusoidal code of its location
and a learned vector for its category. The image features use the same
sinusoidal code, so a query "knows" which feature cells are close to it.
"""

import torch

from pointquery.geometry import PointAnnotation
from pointquery.point_encoder import PointEncoder, grid_positional_map, positional_encoding

torch.manual_seed(0)
enc = PointEncoder(d_model=64, num_categories=4)

q = enc.encode_points([PointAnnotation(0.30, 0.60, 1), PointAnnotation(0.31, 0.60, 1)])
print(q.shape)

# similarity between a point's code and every cell of an 8x8 feature grid
grid = grid_positional_map(8, 8, 64)
sim = grid @ positional_encoding(0.30, 0.60, 64)
print(sim.view(8, 8).argmax().item(), "is the cell index with the most similar code")

# switch either part off for the ablations
pos_only = PointEncoder(64, 4, use_category=False)
print(torch.equal(*pos_only.encode_points([PointAnnotation(0.3, 0.6, 0), PointAnnotation(0.3, 0.6, 3)])))
