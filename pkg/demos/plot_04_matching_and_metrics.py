"""
Matching predictions and scoring them
=====================================

The set-prediction detector pairs its outputs with targets by solving an
assignment problem. Scoring uses COCO-style AP and a breakdown of the
mistakes into error types.
"""

import numpy as np

from pointquery.detector import Detection
from pointquery.geometry import Box
from pointquery.matcher import assignment_cost, cost_matrix, hungarian
from pointquery.metrics import coco_eval, tide_diagnose

rng = np.random.default_rng(0)
probs = rng.dirichlet(np.ones(5), size=6)  # 6 queries, 4 classes + no-object
preds = np.array([[0.1, 0.1, 0.3, 0.3], [0.5, 0.5, 0.9, 0.9]] * 3)
targets = np.array([[0.5, 0.5, 0.9, 0.9], [0.1, 0.1, 0.3, 0.3]])
costs = cost_matrix(probs, preds, np.array([2, 0]), targets)
cols = hungarian(costs)
print("target -> query", cols, "cost", round(assignment_cost(costs, cols), 3))

gt = {0: ([(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.9, 0.9)], [0, 1])}
dets = {0: [
    Detection(Box(0.1, 0.1, 0.3, 0.3), 0, 0.9),
    Detection(Box(0.1, 0.1, 0.3, 0.3), 0, 0.5),    # duplicate
    Detection(Box(0.5, 0.5, 0.9, 0.9), 2, 0.8),    # wrong class
]}
print(coco_eval(dets, gt))
print(tide_diagnose(dets, gt).counts)
