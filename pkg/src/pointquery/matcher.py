"""Bipartite assignment between ground-truth targets and predicted queries.

The solver is the shortest-augmenting-path form of Kuhn-Munkres with dual
potentials (Jonker-Volgenant style). Rows are targets, columns are queries,
and every row is assigned to a distinct column.
"""

from __future__ import annotations

import numpy as np

from . import geometry

__all__ = ["match_cost", "cost_matrix", "hungarian", "assignment_cost"]


def match_cost(
    class_prob: float,
    pred_box,
    target_box,
    l1_weight: float = 5.0,
    giou_weight: float = 2.0,
) -> float:
    """Matching cost of one query against one target.

    ``class_prob`` is the query's probability for the target's class. The
    probability (not its log) enters the cost, as in DETR's matcher.
    """
    l1 = float(np.abs(np.asarray(pred_box, dtype=float) - np.asarray(target_box, dtype=float)).sum())
    return -float(class_prob) + l1_weight * l1 + giou_weight * (1.0 - geometry.giou(pred_box, target_box))


def cost_matrix(
    probs: np.ndarray,
    pred_boxes: np.ndarray,
    target_classes: np.ndarray,
    target_boxes: np.ndarray,
    l1_weight: float = 5.0,
    giou_weight: float = 2.0,
) -> np.ndarray:
    """Vectorised :func:`match_cost` for all (target, query) pairs.

    Args:
        probs: (Q, C+1) class probabilities per query.
        pred_boxes: (Q, 4) predicted corner boxes.
        target_classes: (T,) integer labels.
        target_boxes: (T, 4) corner boxes.

    Returns:
        (T, Q) cost matrix.
    """
    probs = np.asarray(probs, dtype=float)
    pred_boxes = np.asarray(pred_boxes, dtype=float).reshape(-1, 4)
    target_boxes = np.asarray(target_boxes, dtype=float).reshape(-1, 4)
    target_classes = np.asarray(target_classes, dtype=int)
    cls = -probs[:, target_classes].T
    l1 = np.abs(target_boxes[:, None, :] - pred_boxes[None, :, :]).sum(-1)
    g = geometry.giou_matrix(target_boxes, pred_boxes)
    return cls + l1_weight * l1 + giou_weight * (1.0 - g)


def hungarian(costs) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Args:
        costs: (n, m) array with ``m >= n`` and finite entries.

    Returns:
        Integer array ``cols`` of length n; row ``i`` is assigned column
        ``cols[i]``. Ties are broken towards the lowest column index, and
        rows are inserted in index order, so the result is reproducible.

    Raises:
        ValueError: if the matrix has more rows than columns or contains a
            non-finite entry.
    """
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n > m:
        raise ValueError(f"need at least as many columns as rows, got {n}x{m}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=int)

    # 1-based arrays; column 0 is the virtual source column.
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    col_owner = np.zeros(m + 1, dtype=int)  # row matched to each column (0 = free)
    way = np.zeros(m + 1, dtype=int)

    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[col_owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1

    cols = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if col_owner[j]:
            cols[col_owner[j] - 1] = j - 1
    return cols


def assignment_cost(costs, cols) -> float:
    c = np.asarray(costs, dtype=float)
    return float(c[np.arange(len(cols)), cols].sum())
