"""Pseudo-box mIoU, COCO-style AP/AR and TIDE-style error breakdown.

Inputs are keyed by image id:

* ground truth: ``{image_id: (boxes (n, 4), categories (n,))}``
* detections: ``{image_id: [Detection, ...]}``

Boxes are normalized corner boxes; size buckets are therefore defined on
normalized area (see :func:`area_ranges`).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detector import Detection
from .geometry import Box, iou, iou_matrix

__all__ = [
    "EvalParams",
    "EvalResult",
    "ErrorProfile",
    "area_ranges",
    "pseudo_miou",
    "instance_recall",
    "coco_eval",
    "average_precision",
    "tide_diagnose",
    "ERROR_TYPES",
]

ERROR_TYPES = ("Cls", "Loc", "Both", "Dupe", "Bkg", "Miss")
METRIC_NAMES = ("AP", "AP50", "AP75", "APs", "APm", "APl", "AR1", "AR10", "AR100", "ARs", "ARm", "ARl")


def area_ranges(reference_size: int = 256) -> dict[str, tuple[float, float]]:
    """Size buckets in normalized area.

    COCO's 32^2 and 96^2 pixel thresholds are rescaled by
    ``(canvas / reference_size)^2`` and divided by the canvas area, so the
    canvas size cancels: ``small < (32 / reference_size)^2`` and
    ``large > (96 / reference_size)^2``.
    """
    small = (32.0 / reference_size) ** 2
    large = (96.0 / reference_size) ** 2
    return {"all": (0.0, np.inf), "small": (0.0, small), "medium": (small, large), "large": (large, np.inf)}


@dataclass(frozen=True)
class EvalParams:
    iou_thresholds: tuple[float, ...] = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
    recall_thresholds: tuple[float, ...] = tuple(np.round(np.linspace(0.0, 1.0, 101), 2))
    max_dets: tuple[int, ...] = (1, 10, 100)
    areas: Mapping[str, tuple[float, float]] = field(default_factory=lambda: area_ranges())
    categories: tuple[int, ...] | None = None


@dataclass(frozen=True)
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    APs: float
    APm: float
    APl: float
    AR1: float
    AR10: float
    AR100: float
    ARs: float
    ARm: float
    ARl: float

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass
class ErrorProfile:
    counts: dict[str, int]
    delta_ap: dict[str, float]
    num_tp: int
    num_fp: int
    num_fn: int
    base_ap50: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- helpers -----------------------------------------------------------------


def _gt_arrays(gt) -> tuple[np.ndarray, np.ndarray]:
    boxes, cats = gt
    return np.asarray(boxes, dtype=float).reshape(-1, 4), np.asarray(cats, dtype=int).reshape(-1)


def _det_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    boxes = np.array([d.box for d in dets], dtype=float).reshape(-1, 4)
    cats = np.array([d.category for d in dets], dtype=int)
    scores = np.array([d.score for d in dets], dtype=float)
    return boxes, cats, scores


def _areas(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


# -- mIoU / recall -----------------------------------------------------------


def pseudo_miou(pseudo: Mapping, ground_truth: Mapping) -> float:
    """Mean IoU between pseudo-boxes and their ground-truth instances.

    Both mappings are keyed by an instance id (e.g. ``(scene_id, index)``).
    Ground-truth instances without a pseudo-box count as IoU 0.

    Raises:
        KeyError: if a pseudo-box refers to an unknown instance.
    """
    unknown = set(pseudo) - set(ground_truth)
    if unknown:
        raise KeyError(f"pseudo-labels for unknown instance ids: {sorted(unknown)[:5]}")
    if not ground_truth:
        return 0.0
    return float(np.mean([iou(pseudo[k], ground_truth[k]) if k in pseudo else 0.0 for k in ground_truth]))


def instance_recall(boxes_by_image: Mapping, ground_truth: Mapping, iou_threshold: float = 0.5) -> float:
    """Share of ground-truth instances covered by a same-category box with IoU >= threshold.

    ``boxes_by_image`` maps image id to ``(boxes, categories)``.
    """
    hit = total = 0
    for image_id, gt in ground_truth.items():
        gb, gc = _gt_arrays(gt)
        total += len(gb)
        if image_id not in boxes_by_image or not len(gb):
            continue
        pb, pc = _gt_arrays(boxes_by_image[image_id])
        if not len(pb):
            continue
        ious = iou_matrix(gb, pb)
        ok = (ious >= iou_threshold) & (gc[:, None] == pc[None, :])
        hit += int(ok.any(axis=1).sum())
    return hit / total if total else 0.0


# -- COCO evaluation ---------------------------------------------------------


def _match_image(
    d_boxes, d_scores, g_boxes, g_ignore, iou_thresholds, d_area_ignore
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy score-ordered matching for one image and category.

    Returns ``matched`` and ``ignored`` flags of shape (T, D), for detections
    already sorted by descending score.
    """
    t, nd, ng = len(iou_thresholds), len(d_boxes), len(g_boxes)
    matched = np.zeros((t, nd), dtype=bool)
    ignored = np.zeros((t, nd), dtype=bool)
    if nd == 0:
        return matched, ignored
    # non-ignored ground truth first
    g_order = np.argsort(g_ignore, kind="stable")
    g_boxes, g_ignore = g_boxes[g_order], g_ignore[g_order]
    ious = iou_matrix(d_boxes, g_boxes) if ng else np.zeros((nd, 0))
    for ti, thr in enumerate(iou_thresholds):
        g_used = np.zeros(ng, dtype=bool)
        for di in range(nd):
            best_iou = min(thr, 1 - 1e-10)
            best = -1
            for gi in range(ng):
                if g_used[gi]:
                    continue
                if best > -1 and not g_ignore[best] and g_ignore[gi]:
                    break
                if ious[di, gi] < best_iou:
                    continue
                best_iou = ious[di, gi]
                best = gi
            if best == -1:
                ignored[ti, di] = d_area_ignore[di]
                continue
            g_used[best] = True
            matched[ti, di] = True
            ignored[ti, di] = g_ignore[best]
    return matched, ignored


def _interpolated_precision(tp: np.ndarray, fp: np.ndarray, npos: int, rec_thrs: np.ndarray) -> tuple[np.ndarray, float]:
    tp_sum = np.cumsum(tp, dtype=float)
    fp_sum = np.cumsum(fp, dtype=float)
    rc = tp_sum / npos
    # every prefix holds at least one detection, so the denominator is >= 1
    pr = tp_sum / (fp_sum + tp_sum)
    recall = float(rc[-1]) if len(rc) else 0.0
    # precision envelope: monotone non-increasing from the right
    pr = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
    q = np.zeros(len(rec_thrs))
    inds = np.searchsorted(rc, rec_thrs, side="left")
    valid = inds < len(pr)
    q[valid] = pr[inds[valid]]
    return q, recall


def _accumulate(detections, ground_truth, params: EvalParams):
    """Precision (T, R, K, A, M) and recall (T, K, A, M) tables; -1 where undefined."""
    image_ids = sorted(set(ground_truth) | set(detections))
    cats = params.categories
    if cats is None:
        found = set()
        for gt in ground_truth.values():
            found.update(_gt_arrays(gt)[1].tolist())
        for dets in detections.values():
            found.update(d.category for d in dets)
        cats = tuple(sorted(found))
    thrs = np.asarray(params.iou_thresholds, dtype=float)
    rec_thrs = np.asarray(params.recall_thresholds, dtype=float)
    area_names = list(params.areas)
    max_dets = list(params.max_dets)
    top = max(max_dets)
    T, R, K, A, M = len(thrs), len(rec_thrs), len(cats), len(area_names), len(max_dets)
    precision = -np.ones((T, R, K, A, M))
    recall = -np.ones((T, K, A, M))

    per_image = {}
    for img in image_ids:
        gb, gc = _gt_arrays(ground_truth.get(img, (np.zeros((0, 4)), np.zeros(0, dtype=int))))
        db, dc, ds = _det_arrays(detections.get(img, []))
        per_image[img] = (gb, gc, db, dc, ds)

    for k, cat in enumerate(cats):
        for a, name in enumerate(area_names):
            lo, hi = params.areas[name]
            npos = 0
            per_img_results = []
            for img in image_ids:
                gb, gc, db, dc, ds = per_image[img]
                g = gb[gc == cat]
                g_area = _areas(g)
                g_ignore = (g_area < lo) | (g_area > hi)
                npos += int((~g_ignore).sum())
                sel = dc == cat
                d, s = db[sel], ds[sel]
                order = np.argsort(-s, kind="stable")[:top]
                d, s = d[order], s[order]
                d_area = _areas(d)
                d_area_ignore = (d_area < lo) | (d_area > hi)
                m, ig = _match_image(d, s, g, g_ignore, thrs, d_area_ignore)
                per_img_results.append((s, m, ig))
            if npos == 0:
                continue
            for mi, md in enumerate(max_dets):
                s_all = np.concatenate([r[0][:md] for r in per_img_results]) if per_img_results else np.zeros(0)
                order = np.argsort(-s_all, kind="mergesort")
                m_all = np.concatenate([r[1][:, :md] for r in per_img_results], axis=1)[:, order]
                ig_all = np.concatenate([r[2][:, :md] for r in per_img_results], axis=1)[:, order]
                for ti in range(T):
                    keep = ~ig_all[ti]
                    tp = m_all[ti][keep]
                    fp = ~m_all[ti][keep]
                    q, rc = _interpolated_precision(tp, fp, npos, rec_thrs)
                    precision[ti, :, k, a, mi] = q
                    recall[ti, k, a, mi] = rc
    return precision, recall, thrs, area_names, max_dets


def _mean_valid(x: np.ndarray) -> float:
    v = x[x > -1]
    return float(v.mean()) if v.size else -1.0


def coco_eval(detections: Mapping, ground_truth: Mapping, params: EvalParams | None = None) -> EvalResult:
    """COCO box metrics.

    Categories without any (in-range) ground truth are left out of the
    means. A metric with no ground truth at all in its size bucket is -1,
    following the COCO convention.
    """
    params = params or EvalParams()
    precision, recall, thrs, area_names, max_dets = _accumulate(detections, ground_truth, params)
    a_idx = {n: i for i, n in enumerate(area_names)}
    m_idx = {m: i for i, m in enumerate(max_dets)}
    top = m_idx[max(max_dets)]

    def ap(thr=None, area="all"):
        p = precision[..., a_idx[area], top]
        if thr is not None:
            p = p[np.isclose(thrs, thr)]
        return _mean_valid(p)

    def ar(md, area="all"):
        return _mean_valid(recall[:, :, a_idx[area], m_idx[md]])

    return EvalResult(
        AP=ap(),
        AP50=ap(0.5),
        AP75=ap(0.75),
        APs=ap(area="small"),
        APm=ap(area="medium"),
        APl=ap(area="large"),
        AR1=ar(max_dets[0]),
        AR10=ar(max_dets[1] if len(max_dets) > 1 else max_dets[0]),
        AR100=ar(max(max_dets)),
        ARs=ar(max(max_dets), "small"),
        ARm=ar(max(max_dets), "medium"),
        ARl=ar(max(max_dets), "large"),
    )


def average_precision(detections: Mapping, ground_truth: Mapping, iou_threshold: float = 0.5, params=None) -> float:
    """AP at a single IoU threshold over all areas, 0 when undefined."""
    base = params or EvalParams()
    p = dataclasses.replace(base, iou_thresholds=(iou_threshold,), areas={"all": (0.0, np.inf)})
    precision, *_ = _accumulate(detections, ground_truth, p)
    v = _mean_valid(precision[..., 0, -1])
    return max(v, 0.0)


# -- TIDE-style diagnosis ----------------------------------------------------


def _classify_image(db, dc, ds, gb, gc, t_fg, t_bg):
    """Label every detection of one image as TP or one error type.

    Returns per-detection labels, per-detection target gt index (-1 if none),
    and the set of ground-truth indices matched by a TP.
    """
    order = np.argsort(-ds, kind="stable")
    labels = [""] * len(db)
    target = -np.ones(len(db), dtype=int)
    g_used = np.zeros(len(gb), dtype=bool)
    ious = iou_matrix(db, gb) if len(gb) and len(db) else np.zeros((len(db), len(gb)))
    same = dc[:, None] == gc[None, :] if len(gb) else np.zeros((len(db), 0), dtype=bool)

    for di in order:
        cand = np.where(same[di] & ~g_used & (ious[di] >= t_fg), ious[di], -1.0)
        if len(gb) and cand.max() >= t_fg:
            gi = int(np.argmax(cand))
            g_used[gi] = True
            labels[di] = "TP"
            target[di] = gi
    for di in order:
        if labels[di]:
            continue
        cls_iou = np.where(same[di], ious[di], -1.0)
        other_iou = np.where(~same[di], ious[di], -1.0)
        best_cls = cls_iou.max() if len(gb) else -1.0
        best_other = other_iou.max() if len(gb) else -1.0
        if best_other >= t_fg:
            labels[di], target[di] = "Cls", int(np.argmax(other_iou))
        elif best_cls >= t_fg:
            labels[di], target[di] = "Dupe", int(np.argmax(cls_iou))
        elif best_cls >= t_bg:
            labels[di], target[di] = "Loc", int(np.argmax(cls_iou))
        elif best_other >= t_bg:
            labels[di], target[di] = "Both", int(np.argmax(other_iou))
        else:
            labels[di] = "Bkg"
    return labels, target, g_used


def tide_diagnose(detections: Mapping, ground_truth: Mapping, t_fg: float = 0.5, t_bg: float = 0.1) -> ErrorProfile:
    """Count error types and attribute AP50 loss to each.

    Every detection that is not a true positive at ``t_fg`` gets exactly one
    of Cls / Dupe / Loc / Both / Bkg, checked in that order. A ground truth
    without a true positive is a Miss unless a Cls or Loc error points at
    it. Each delta is the AP50 gain from fixing only that error type.
    """
    counts = {k: 0 for k in ERROR_TYPES}
    n_tp = n_fp = n_fn = 0
    fixes = {k: {} for k in ERROR_TYPES}
    fixed_gt_miss: dict = {}
    image_ids = sorted(set(ground_truth) | set(detections))

    for img in image_ids:
        gb, gc = _gt_arrays(ground_truth.get(img, (np.zeros((0, 4)), np.zeros(0, dtype=int))))
        dets = list(detections.get(img, []))
        db, dc, ds = _det_arrays(dets)
        labels, target, g_used = _classify_image(db, dc, ds, gb, gc, t_fg, t_bg)
        covered = {int(target[i]) for i, lab in enumerate(labels) if lab in ("Cls", "Loc")}
        n_tp += labels.count("TP")
        fp_here = len(labels) - labels.count("TP")
        n_fp += fp_here
        for lab in labels:
            if lab != "TP":
                counts[lab] += 1
        missed = [gi for gi in range(len(gb)) if not g_used[gi] and gi not in covered]
        n_fn += int((~g_used).sum())
        counts["Miss"] += len(missed)

        # per-error-type fixed copies of this image
        for err in ("Cls", "Loc", "Both", "Dupe", "Bkg"):
            out = []
            for d, lab, gi in zip(dets, labels, target):
                if lab != err:
                    out.append(d)
                elif err == "Cls":
                    out.append(Detection(d.box, int(gc[gi]), d.score))
                elif err == "Loc":
                    out.append(Detection(Box(*map(float, gb[gi])), d.category, d.score))
                # Both / Dupe / Bkg: suppressed
            fixes[err][img] = out
        keep = np.ones(len(gb), dtype=bool)
        keep[missed] = False
        fixed_gt_miss[img] = (gb[keep], gc[keep])

    if n_fp != sum(counts[k] for k in ("Cls", "Loc", "Both", "Dupe", "Bkg")):
        raise AssertionError("false-positive error categories do not partition the false positives")
    if counts["Miss"] > n_fn:
        raise AssertionError("more misses than unmatched ground truths")

    base = average_precision(detections, ground_truth, t_fg)
    delta = {}
    for err in ("Cls", "Loc", "Both", "Dupe", "Bkg"):
        delta[err] = average_precision(fixes[err], ground_truth, t_fg) - base if counts[err] else 0.0
    delta["Miss"] = average_precision(detections, fixed_gt_miss, t_fg) - base if counts["Miss"] else 0.0
    return ErrorProfile(counts, delta, n_tp, n_fp, n_fn, base)
