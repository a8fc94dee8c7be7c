"""
Boxes, overlaps and point offsets
=================================

A box is four numbers in [0, 1]. A point plus four nonnegative distances to
the sides is another way of writing the same box, and it can never produce a
box that misses the point.
"""

import numpy as np

from pointquery.geometry import Box, contains, decode_offsets, encode_offsets, giou, iou

a = Box(0.0, 0.0, 0.5, 0.5)
b = Box(0.25, 0.25, 0.75, 0.75)
print("iou ", iou(a, b))   # 0.0625 / 0.4375
print("giou", giou(a, b))  # iou minus the empty share of the enclosing box

# disjoint boxes: IoU is flat at zero, GIoU still says how far apart they are
far = Box(0.9, 0.9, 1.0, 1.0)
print(iou(Box(0, 0, 0.1, 0.1), far), giou(Box(0, 0, 0.1, 0.1), far))

# point -> offsets -> box
p = (0.5, 0.5)
quad = encode_offsets(p, Box(0.4, 0.3, 0.6, 0.7))
print(quad)
print(decode_offsets(p, quad))

# any offsets in [0, 1] give a box that contains the point
rng = np.random.default_rng(0)
print(all(contains(decode_offsets(p, rng.random(4)), *p) for _ in range(1000)))
