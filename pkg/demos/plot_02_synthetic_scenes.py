"""
Synthetic scenes and point annotations
======================================

Scenes hold a few filled shapes on a noisy canvas. Every instance keeps its
mask, so a point can be sampled on the object itself rather than anywhere in
its box.
"""

import numpy as np

from pointquery.synth_data import DataConfig, annotate_points, generate_scenes, split_dataset

cfg = DataConfig()
scenes = generate_scenes(200, cfg, seed=0)
print(scenes[0].image.shape, scenes[0].image.dtype)
print("names", cfg.category_names)

counts = np.bincount(np.concatenate([s.categories for s in scenes]), minlength=cfg.num_categories)
print("instances per category", counts)

# three ways to click on an object
for mode in ("mask", "bbox", "center"):
    pts = annotate_points(scenes[:1], mode, seed=0)[scenes[0].scene_id]
    print(mode, [(round(p.x, 3), round(p.y, 3), p.category) for p in pts])

# 20% get full boxes, the rest only points
split = split_dataset([s.scene_id for s in scenes], 0.2, seed=0)
print(len(split.full_set), "fully labeled,", len(split.weak_set), "point-only")
