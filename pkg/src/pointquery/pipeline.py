"""Teacher / pseudo-label / student self-training, plus the point-free baseline.

Weakly labeled images enter the pipeline as :class:`WeakImage` records that
carry only pixels and point annotations; their ground-truth boxes stay with
the caller and are only consulted by the metrics.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import metrics
from .detector import Checkpoint, Detection, Detector, ModelConfig, box_loss, build_model, images_to_tensor, set_loss
from .geometry import Box, PointAnnotation, contains
from .synth_data import DataConfig, Scene, annotate_points, generate_scenes, sample_point, split_dataset

__all__ = [
    "ABLATIONS",
    "TrainPlan",
    "PseudoLabel",
    "WeakImage",
    "TrainingDivergedError",
    "ExperimentConfig",
    "lr_factor",
    "train_teacher",
    "train_student",
    "generate_pseudo_labels",
    "generate_pseudo_labels_baseline",
    "detect",
    "weak_images",
    "ground_truth_of",
    "run_experiment",
    "prepare_data",
    "pseudo_box_stats",
    "pseudo_as_detections",
    "pseudo_as_boxes",
    "report_json",
    "write_report",
]

log = logging.getLogger(__name__)

PSEUDO_SCORE = 0.5


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 60
    warmup_epochs: int = 1
    milestones: tuple[int, ...] = (40, 53)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    grad_clip: float = 1.0
    warmup_factor: float = 0.001
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 1 or ms[-1] >= self.epochs):
            raise ValueError(f"milestones {ms} must lie in [1, epochs={self.epochs})")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def for_epochs(cls, epochs: int, **kw) -> "TrainPlan":
        """Plan with decay milestones at 2/3 and 8/9 of training."""
        ms = sorted({m for m in (round(epochs * 2 / 3), round(epochs * 8 / 9)) if 1 <= m < epochs})
        return cls(epochs=epochs, milestones=tuple(ms), **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(**d)


def lr_factor(step: int, steps_per_epoch: int, plan: TrainPlan) -> float:
    """Multiplier on the base learning rate at a given optimizer step.

    Linear warmup from ``warmup_factor`` over the warmup epochs, then a x0.1
    decay at each milestone epoch.
    """
    warm = plan.warmup_epochs * steps_per_epoch
    if step < warm:
        alpha = step / warm
        return plan.warmup_factor * (1 - alpha) + alpha
    epoch = step // steps_per_epoch
    return 0.1 ** sum(epoch >= m for m in plan.milestones)


@dataclass(frozen=True)
class PseudoLabel:
    scene_id: int
    box: Box
    category: int
    score: float = PSEUDO_SCORE
    instance_index: int | None = None  # index of the source point, when there is one


@dataclass
class WeakImage:
    scene_id: int
    image: np.ndarray
    points: list[PointAnnotation]


def weak_images(scenes: Sequence[Scene], points: dict[int, list[PointAnnotation]] | None = None) -> list[WeakImage]:
    """Strip scenes down to pixels and points.

    ``points`` defaults to the annotation stored on each instance.
    """
    out = []
    for s in scenes:
        pts = points[s.scene_id] if points is not None else [inst.point for inst in s.instances]
        if any(p is None for p in pts):
            raise ValueError(f"scene {s.scene_id} has instances without a point annotation")
        out.append(WeakImage(s.scene_id, s.image, list(pts)))
    return out


def ground_truth_of(scenes: Iterable[Scene]) -> dict:
    return {s.scene_id: (s.boxes, s.categories) for s in scenes}


# -- training ----------------------------------------------------------------


def _flip_boxes(boxes: np.ndarray) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = 1.0 - boxes[:, 2]
    out[:, 2] = 1.0 - boxes[:, 0]
    return out


def _optimizer(model: Detector, plan: TrainPlan):
    return torch.optim.AdamW(model.parameters(), lr=plan.lr, weight_decay=plan.weight_decay)


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _check_finite(loss: torch.Tensor, epoch: int, step: int, lr: float) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}, lr {lr:.3g}")


def _run_epochs(model, plan, n_items, make_batch_loss, kind: str, progress=None) -> list[float]:
    opt = _optimizer(model, plan)
    spe = math.ceil(n_items / plan.batch_size)
    rng = np.random.default_rng([plan.seed, 1])
    step = 0
    history = []
    for epoch in range(plan.epochs):
        model.train()
        order = rng.permutation(n_items)
        total, count = 0.0, 0
        for b in range(spe):
            idx = order[b * plan.batch_size : (b + 1) * plan.batch_size]
            lr = plan.lr * lr_factor(step, spe, plan)
            for g in opt.param_groups:
                g["lr"] = lr
            loss, n = make_batch_loss(idx, epoch, rng)
            _check_finite(loss, epoch, step, lr)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if plan.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), plan.grad_clip)
            opt.step()
            total += loss.item() * n
            count += n
            step += 1
        history.append(total / max(count, 1))
        log.info("%s epoch %d/%d loss %.4f", kind, epoch + 1, plan.epochs, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    model.eval()
    return history


def train_teacher(
    config: ModelConfig,
    plan: TrainPlan,
    full_set: Sequence[Scene],
    point_mode: str = "mask",
    progress=None,
) -> Checkpoint:
    """Train the point-conditioned detector on fully labeled scenes.

    Each epoch draws a fresh point per instance (``point_mode`` as in
    :func:`synth_data.sample_point`) and minimizes the mean box loss over
    all point queries.
    """
    if config.mode != "point":
        raise ValueError("teacher must be a point-mode model")
    if not full_set:
        raise ValueError("full_set is empty")
    _seed_all(plan.seed)
    model = build_model(config, plan.seed)
    scenes = list(full_set)

    def batch_loss(idx, epoch, rng):
        imgs, xy, cats, tgt, valid = [], [], [], [], []
        n_max = max(1, max(len(scenes[i].instances) for i in idx))
        for i in idx:
            sc = scenes[i]
            pts = np.array([sample_point(inst, point_mode, rng)[:2] for inst in sc.instances]).reshape(-1, 2)
            boxes = sc.boxes
            img = sc.image
            if plan.hflip and rng.random() < 0.5:
                img = img[:, ::-1]
                boxes = _flip_boxes(boxes)
                pts = pts.copy()
                pts[:, 0] = 1.0 - pts[:, 0]
            n = len(sc.instances)
            p = np.zeros((n_max, 2))
            p[:n] = pts
            bx = np.zeros((n_max, 4))
            bx[:n] = boxes
            c = np.zeros(n_max, dtype=np.int64)
            c[:n] = sc.categories
            v = np.zeros(n_max, dtype=bool)
            v[:n] = True
            imgs.append(np.ascontiguousarray(img))
            xy.append(p)
            cats.append(c)
            tgt.append(bx)
            valid.append(v)
        valid_t = torch.from_numpy(np.stack(valid))
        out = model.forward_points(
            images_to_tensor(imgs),
            torch.from_numpy(np.stack(xy)).float(),
            torch.from_numpy(np.stack(cats)),
            valid_t,
        )
        target = torch.from_numpy(np.stack(tgt)).float()
        n_pts = int(valid_t.sum())
        loss = box_loss(out["boxes"], target, config.l1_weight, config.giou_weight)[valid_t].sum()
        for _, aux_boxes in out["aux"]:
            loss = loss + box_loss(aux_boxes, target, config.l1_weight, config.giou_weight)[valid_t].sum()
        return loss / max(n_pts, 1), n_pts

    history = _run_epochs(model, plan, len(scenes), batch_loss, "teacher", progress)
    meta = {"kind": "teacher", "epoch": plan.epochs, "seed": plan.seed, "point_mode": point_mode, "loss_log": history}
    return Checkpoint(model, meta)


@dataclass
class _BoxTarget:
    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray


def _set_batch_loss(model: Detector, items: Sequence[_BoxTarget], flips: Sequence[bool]):
    cfg = model.config
    imgs, targets = [], []
    for it, flip in zip(items, flips):
        if flip:
            imgs.append(np.ascontiguousarray(it.image[:, ::-1]))
            targets.append((_flip_boxes(it.boxes), it.classes))
        else:
            imgs.append(it.image)
            targets.append((it.boxes, it.classes))
    out = model.forward_set(images_to_tensor(imgs))
    layers = [(out["logits"], out["boxes"])] + list(out["aux"])
    total = torch.zeros(())
    n_targets = 0
    for b, (boxes, classes) in enumerate(targets):
        tc = torch.from_numpy(np.asarray(classes, dtype=np.int64))
        tb = torch.from_numpy(np.asarray(boxes, dtype=np.float32)).reshape(-1, 4)
        n_targets += len(tc)
        for logits, pboxes in layers:
            cols = model.match(logits[b], pboxes[b], classes, boxes)
            total = total + set_loss(
                logits[b], pboxes[b], tc, tb, cols,
                l1_weight=cfg.l1_weight, giou_weight=cfg.giou_weight,
                class_weight=cfg.class_weight, eos_coef=cfg.eos_coef,
            )
    return total / max(n_targets, 1), max(n_targets, 1)


def train_student(
    config: ModelConfig,
    plan: TrainPlan,
    full_set: Sequence[Scene],
    pseudo_labels: Sequence[PseudoLabel] = (),
    weak: Sequence[WeakImage] = (),
    progress=None,
) -> Checkpoint:
    """Train the set-prediction detector on full labels plus pseudo-labels.

    Pseudo-labels are hard targets (their score is ignored). Fully labeled
    and pseudo-labeled images are shuffled together each epoch. With no
    weak images this is the supervised-only control.
    """
    if config.mode != "set":
        raise ValueError("student must be a set-mode model")
    if not full_set:
        raise ValueError("full_set is empty")
    _seed_all(plan.seed)
    model = build_model(config, plan.seed)
    items = [_BoxTarget(s.image, s.boxes, s.categories) for s in full_set]
    by_scene: dict[int, list[PseudoLabel]] = {}
    for pl in pseudo_labels:
        by_scene.setdefault(pl.scene_id, []).append(pl)
    for w in weak:
        pls = by_scene.get(w.scene_id, [])
        items.append(
            _BoxTarget(
                w.image,
                np.array([p.box for p in pls], dtype=float).reshape(-1, 4),
                np.array([p.category for p in pls], dtype=int),
            )
        )

    def batch_loss(idx, epoch, rng):
        flips = [plan.hflip and rng.random() < 0.5 for _ in idx]
        return _set_batch_loss(model, [items[i] for i in idx], flips)

    history = _run_epochs(model, plan, len(items), batch_loss, "student", progress)
    meta = {
        "kind": "student" if weak else "supervised",
        "epoch": plan.epochs,
        "seed": plan.seed,
        "num_images": len(items),
        "loss_log": history,
    }
    return Checkpoint(model, meta)


# -- inference ---------------------------------------------------------------


def _batches(seq: Sequence, size: int):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


@torch.no_grad()
def generate_pseudo_labels(teacher: Checkpoint, weak: Sequence[WeakImage], batch_size: int = 64) -> list[PseudoLabel]:
    """One pseudo-box per point annotation, category copied from the point, score 0.5."""
    model = teacher.model
    if model.config.mode != "point":
        raise ValueError("teacher must be a point-mode model")
    model.eval()
    out: list[PseudoLabel] = []
    for chunk in _batches(list(weak), batch_size):
        n_max = max(1, max(len(w.points) for w in chunk))
        xy = np.zeros((len(chunk), n_max, 2))
        cats = np.zeros((len(chunk), n_max), dtype=np.int64)
        valid = np.zeros((len(chunk), n_max), dtype=bool)
        for b, w in enumerate(chunk):
            for j, p in enumerate(w.points):
                xy[b, j] = (p.x, p.y)
                cats[b, j] = p.category
                valid[b, j] = True
        res = model.forward_points(
            images_to_tensor([w.image for w in chunk], model.config.canvas_size),
            torch.from_numpy(xy).float(),
            torch.from_numpy(cats),
            torch.from_numpy(valid),
        )
        boxes = res["boxes"].double().numpy()
        for b, w in enumerate(chunk):
            for j, p in enumerate(w.points):
                out.append(PseudoLabel(w.scene_id, Box(*map(float, boxes[b, j])), int(p.category), PSEUDO_SCORE, j))
    return out


@torch.no_grad()
def _set_outputs(model: Detector, images: Sequence[np.ndarray], batch_size: int = 64):
    for chunk in _batches(list(images), batch_size):
        res = model.forward_set(images_to_tensor(chunk, model.config.canvas_size))
        probs = res["logits"].softmax(-1).double().numpy()
        boxes = res["boxes"].double().numpy()
        yield from zip(probs, boxes)


def generate_pseudo_labels_baseline(
    teacher: Checkpoint, weak: Sequence, tau: float = 0.7, constant_score: bool = False, batch_size: int = 64
) -> list[PseudoLabel]:
    """Thresholded pseudo-boxes from a point-free detector.

    A query is kept when its most likely class is not "no object" and that
    class probability exceeds ``tau``. Points on ``weak`` are ignored.
    """
    model = teacher.model
    if model.config.mode != "set":
        raise ValueError("baseline teacher must be a set-mode model")
    model.eval()
    out = []
    for w, (probs, boxes) in zip(weak, _set_outputs(model, [w.image for w in weak], batch_size)):
        top = probs.argmax(-1)
        for q in range(len(probs)):
            c = int(top[q])
            if c == probs.shape[1] - 1 or not probs[q, c] > tau:
                continue
            score = PSEUDO_SCORE if constant_score else float(probs[q, c])
            out.append(PseudoLabel(w.scene_id, Box(*map(float, boxes[q])), c, score))
    return out


def detect(checkpoint: Checkpoint, images: Sequence[tuple[int, np.ndarray]], batch_size: int = 64) -> dict:
    """Set-mode detections for ``(image_id, image)`` pairs, one per query.

    Score is the highest foreground probability and category its argmax.
    """
    model = checkpoint.model
    model.eval()
    ids = [i for i, _ in images]
    out = {}
    for img_id, (probs, boxes) in zip(ids, _set_outputs(model, [im for _, im in images], batch_size)):
        fg = probs[:, :-1]
        cats = fg.argmax(-1)
        out[img_id] = [
            Detection(Box(*map(float, boxes[q])), int(cats[q]), float(fg[q, cats[q]])) for q in range(len(fg))
        ]
    return out


def pseudo_as_detections(labels: Sequence[PseudoLabel]) -> dict:
    out: dict[int, list[Detection]] = {}
    for pl in labels:
        out.setdefault(pl.scene_id, []).append(Detection(pl.box, pl.category, pl.score))
    return out


def pseudo_as_boxes(labels: Sequence[PseudoLabel]) -> dict:
    grouped: dict[int, list[PseudoLabel]] = {}
    for pl in labels:
        grouped.setdefault(pl.scene_id, []).append(pl)
    return {
        k: (np.array([p.box for p in v], dtype=float).reshape(-1, 4), np.array([p.category for p in v], dtype=int))
        for k, v in grouped.items()
    }


def pseudo_box_stats(labels: Sequence[PseudoLabel], scenes: Sequence[Scene], weak: Sequence[WeakImage]) -> dict:
    """mIoU, recall@0.5 and point containment of point-mode pseudo-labels."""
    gt = {(s.scene_id, i): inst.box for s in scenes for i, inst in enumerate(s.instances)}
    pseudo = {(pl.scene_id, pl.instance_index): pl.box for pl in labels}
    points = {(w.scene_id, i): p for w in weak for i, p in enumerate(w.points)}
    inside = [contains(pl.box, points[(pl.scene_id, pl.instance_index)].x, points[(pl.scene_id, pl.instance_index)].y) for pl in labels]
    return {
        "miou": metrics.pseudo_miou(pseudo, gt),
        "recall50": metrics.instance_recall(pseudo_as_boxes(labels), ground_truth_of(scenes)),
        "outside_point_fraction": 1.0 - (float(np.mean(inside)) if inside else 1.0),
        "count": len(labels),
    }


# -- experiment --------------------------------------------------------------

ABLATIONS = ("pos_only", "cat_only", "center", "absolute")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    num_train: int = 2000
    num_val: int = 300
    fraction: float = 0.2
    point_mode: str = "mask"
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(mode="point"))
    student: ModelConfig = field(default_factory=lambda: ModelConfig(mode="set"))
    teacher_plan: TrainPlan = field(default_factory=lambda: TrainPlan.for_epochs(160, batch_size=8))
    student_plan: TrainPlan = field(default_factory=lambda: TrainPlan.for_epochs(60))
    tau: float = 0.7
    baseline_student: bool = True
    ablations: tuple[str, ...] = ()
    area_reference: int = 256

    def __post_init__(self):
        object.__setattr__(self, "ablations", tuple(self.ablations))
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablations {sorted(bad)}; choose from {ABLATIONS}")
        if not 0 < self.fraction < 1:
            raise ValueError(f"fraction must be in (0, 1), got {self.fraction}")
        if self.point_mode not in ("mask", "bbox", "center"):
            raise ValueError(f"unknown point mode {self.point_mode!r}")
        if self.teacher.mode != "point" or self.student.mode != "set":
            raise ValueError("teacher must be point mode and student set mode")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "data": self.data.to_dict(),
            "num_train": self.num_train,
            "num_val": self.num_val,
            "fraction": self.fraction,
            "point_mode": self.point_mode,
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "teacher_plan": self.teacher_plan.to_dict(),
            "student_plan": self.student_plan.to_dict(),
            "tau": self.tau,
            "baseline_student": self.baseline_student,
            "ablations": list(self.ablations),
            "area_reference": self.area_reference,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        for k in ("teacher", "student"):
            if k in d:
                d[k] = ModelConfig.from_dict(d[k])
        for k in ("teacher_plan", "student_plan"):
            if k in d:
                d[k] = TrainPlan.from_dict(d[k])
        return cls(**d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plan(plan: TrainPlan, seed: int, k: int) -> TrainPlan:
    return dataclasses.replace(plan, seed=seed * 100 + k)


def _round(x):
    if isinstance(x, float):
        return round(x, 6)
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    return x


def prepare_data(cfg: ExperimentConfig):
    """Generate train/val scenes, the split, and weak-set point annotations."""
    train = generate_scenes(cfg.num_train, cfg.data, cfg.seed)
    val = generate_scenes(cfg.num_val, cfg.data, cfg.seed, start_id=cfg.num_train)
    split = split_dataset([s.scene_id for s in train], cfg.fraction, cfg.seed)
    by_id = {s.scene_id: s for s in train}
    full = [by_id[i] for i in split.full_set]
    weak_scenes = [by_id[i] for i in split.weak_set]
    pts = annotate_points(weak_scenes, cfg.point_mode, cfg.seed)
    for s in weak_scenes:
        for inst, p in zip(s.instances, pts[s.scene_id]):
            inst.point = p
    return train, val, split, full, weak_scenes


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None) -> dict:
    """Teacher, pseudo-labels and students for one config; returns the report.

    Trains the point teacher and the supervised-only detector on the fully
    labeled split. The supervised detector doubles as the point-free
    baseline teacher. Students are then trained on full + point pseudo-labels
    and, optionally, full + baseline pseudo-labels, and everything is
    evaluated. With ``out_dir`` the report is written as ``report.json``,
    ``summary.csv`` and ``loss_curves.csv``.
    """
    _, val, split, full, weak_scenes = prepare_data(cfg)
    weak = weak_images(weak_scenes)
    weak_gt = ground_truth_of(weak_scenes)
    val_gt = ground_truth_of(val)
    params = metrics.EvalParams(areas=metrics.area_ranges(cfg.area_reference))
    val_images = [(s.scene_id, s.image) for s in val]
    report: dict = {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "fraction": cfg.fraction,
        "num_full": len(split.full_set),
        "num_weak": len(split.weak_set),
        "num_weak_instances": sum(len(s.instances) for s in weak_scenes),
    }
    curves: dict[str, list[float]] = {}

    def note(stage):
        if progress is not None:
            progress(stage)

    note("teacher")
    teacher = train_teacher(cfg.teacher, _plan(cfg.teacher_plan, cfg.seed, 1), full, cfg.point_mode)
    curves["teacher"] = teacher.meta["loss_log"]
    point_labels = generate_pseudo_labels(teacher, weak)
    report["point_pseudo"] = pseudo_box_stats(point_labels, weak_scenes, weak)
    report["point_pseudo"]["coco"] = metrics.coco_eval(pseudo_as_detections(point_labels), weak_gt, params).to_dict()
    report["point_pseudo"]["tide"] = metrics.tide_diagnose(pseudo_as_detections(point_labels), weak_gt).to_dict()

    note("supervised")
    supervised = train_student(cfg.student, _plan(cfg.student_plan, cfg.seed, 2), full)
    curves["supervised"] = supervised.meta["loss_log"]
    base_labels = generate_pseudo_labels_baseline(supervised, weak, cfg.tau)
    base_const = [dataclasses.replace(p, score=PSEUDO_SCORE) for p in base_labels]
    report["baseline_pseudo"] = {
        "count": len(base_labels),
        "recall50": metrics.instance_recall(pseudo_as_boxes(base_labels), weak_gt),
        "coco": metrics.coco_eval(pseudo_as_detections(base_labels), weak_gt, params).to_dict(),
        "coco_constant_score": metrics.coco_eval(pseudo_as_detections(base_const), weak_gt, params).to_dict(),
        "tide": metrics.tide_diagnose(pseudo_as_detections(base_labels), weak_gt).to_dict(),
    }

    note("student")
    student = train_student(cfg.student, _plan(cfg.student_plan, cfg.seed, 3), full, point_labels, weak)
    curves["student_point"] = student.meta["loss_log"]
    students = {
        "supervised": supervised,
        "point": student,
    }
    if cfg.baseline_student:
        note("baseline student")
        bstudent = train_student(cfg.student, _plan(cfg.student_plan, cfg.seed, 4), full, base_labels, weak)
        curves["student_baseline"] = bstudent.meta["loss_log"]
        students["baseline"] = bstudent
    report["students"] = {
        name: metrics.coco_eval(detect(ck, val_images), val_gt, params).to_dict() for name, ck in students.items()
    }

    ablation_cfgs = {
        "pos_only": (cfg.teacher.replace(use_category=False), cfg.point_mode),
        "cat_only": (cfg.teacher.replace(use_position=False), cfg.point_mode),
        "center": (cfg.teacher, "center"),
        "absolute": (cfg.teacher.replace(regression="absolute"), cfg.point_mode),
    }
    report["ablations"] = {}
    for k, name in enumerate(cfg.ablations):
        note(f"ablation {name}")
        mcfg, mode = ablation_cfgs[name]
        t = train_teacher(mcfg, _plan(cfg.teacher_plan, cfg.seed, 10 + k), full, mode)
        curves[f"teacher_{name}"] = t.meta["loss_log"]
        if mode == cfg.point_mode:
            w = weak
        else:
            w = weak_images(weak_scenes, annotate_points(weak_scenes, mode, cfg.seed))
        labels = generate_pseudo_labels(t, w)
        report["ablations"][name] = pseudo_box_stats(labels, weak_scenes, w)

    report = _round(report)
    if out_dir is not None:
        write_report(report, curves, out_dir)
    report["_curves"] = curves
    return report


def report_json(report: dict) -> str:
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(clean, indent=2, sort_keys=True) + "\n"


def summary_rows(report: dict) -> list[dict]:
    rows = []
    for name, m in report.get("students", {}).items():
        rows.append({"model": f"student_{name}", "fraction": report["fraction"], "seed": report["seed"], **m})
    return rows


def write_report(report: dict, curves: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(report))
    rows = summary_rows(report)
    if rows:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        (out / "summary.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "epoch", "loss"])
    for name, hist in curves.items():
        for e, v in enumerate(hist):
            w.writerow([name, e + 1, f"{v:.6f}"])
    (out / "loss_curves.csv").write_text(buf.getvalue())
    return out
