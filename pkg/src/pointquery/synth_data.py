"""Synthetic shape scenes with instance masks, point annotation and splits.

Each shape family maps to one category and has its own size and aspect
prior, so a category carries real information about box shape. Instance
colours are drawn independently of the category.

Pixel cell ``(row, col)`` has its centre at ``((col + 0.5) / W, (row + 0.5) / H)``
in normalized coordinates; a tight box spans whole cells.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import Box, PointAnnotation, iou

__all__ = [
    "ShapeSpec",
    "DataConfig",
    "Instance",
    "Scene",
    "DatasetSplit",
    "PlacementError",
    "DatasetFormatError",
    "DEFAULT_SHAPES",
    "generate_scene",
    "generate_scenes",
    "sample_point",
    "annotate_points",
    "split_dataset",
    "serialize_dataset",
    "load_dataset",
    "rle_encode",
    "rle_decode",
]

POINT_MODES = ("mask", "bbox", "center")
FORMAT_VERSION = 1


class PlacementError(RuntimeError):
    """Scene constraints could not be satisfied within the retry budget."""


class DatasetFormatError(ValueError):
    """An annotation file does not follow the expected schema."""


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    kind: str  # rectangle | ellipse | triangle | ring
    size_range: tuple[float, float]  # sqrt(w*h) as a fraction of the canvas
    aspect_range: tuple[float, float]  # w / h


DEFAULT_SHAPES = (
    ShapeSpec("rectangle", "rectangle", (0.22, 0.38), (1.6, 2.4)),
    ShapeSpec("ellipse", "ellipse", (0.20, 0.36), (0.4, 0.65)),
    ShapeSpec("triangle", "triangle", (0.14, 0.28), (0.8, 1.25)),
    ShapeSpec("ring", "ring", (0.28, 0.45), (0.9, 1.1)),
)


@dataclass(frozen=True)
class DataConfig:
    canvas_size: int = 64
    shapes: tuple[ShapeSpec, ...] = DEFAULT_SHAPES
    min_n: int = 1
    max_n: int = 4
    max_overlap: float = 0.3  # max IoU between any two instance boxes
    visible_only: bool = False  # False: masks keep the full (amodal) shape
    noise_std: float = 8.0  # background noise, in 0-255 intensity units
    max_tries: int = 200

    def __post_init__(self):
        shapes = tuple(s if isinstance(s, ShapeSpec) else ShapeSpec(**s) for s in self.shapes)
        object.__setattr__(self, "shapes", shapes)

    @property
    def num_categories(self) -> int:
        return len(self.shapes)

    @property
    def category_names(self) -> list[str]:
        return [s.name for s in self.shapes]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        if "shapes" in d:
            d["shapes"] = tuple(
                ShapeSpec(s["name"], s["kind"], tuple(s["size_range"]), tuple(s["aspect_range"])) for s in d["shapes"]
            )
        return cls(**d)

    def validate(self) -> None:
        if len(self.shapes) < 2:
            raise ValueError("need at least two shape categories")
        if self.canvas_size < 32:
            raise ValueError(f"canvas_size must be >= 32, got {self.canvas_size}")
        if not 1 <= self.min_n <= self.max_n:
            raise ValueError(f"invalid instance count range [{self.min_n}, {self.max_n}]")
        for s in self.shapes:
            if s.kind not in _RENDERERS:
                raise ValueError(f"unknown shape kind {s.kind!r}")


@dataclass
class Instance:
    category: int
    box: Box
    mask: np.ndarray  # (H, W) bool
    shape_params: dict = field(default_factory=dict)
    point: PointAnnotation | None = None


@dataclass
class Scene:
    scene_id: int
    canvas_size: int
    image: np.ndarray  # (H, W, 3) uint8
    instances: list[Instance]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([inst.box for inst in self.instances], dtype=float).reshape(-1, 4)

    @property
    def categories(self) -> np.ndarray:
        return np.array([inst.category for inst in self.instances], dtype=int)


@dataclass(frozen=True)
class DatasetSplit:
    full_set: tuple[int, ...]
    weak_set: tuple[int, ...]
    fraction: float
    seed: int


# -- rendering ---------------------------------------------------------------


def _grid(n: int):
    c = (np.arange(n) + 0.5) / n
    return c[None, :], c[:, None]  # xs (1, W), ys (H, 1)


def _render_rectangle(xs, ys, cx, cy, w, h):
    return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)


def _render_ellipse(xs, ys, cx, cy, w, h):
    return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0


def _render_triangle(xs, ys, cx, cy, w, h):
    # apex at top centre, base along the bottom edge
    top = cy - h / 2
    frac = (ys - top) / h
    return (frac >= 0) & (frac <= 1) & (np.abs(xs - cx) <= frac * w / 2)


def _render_ring(xs, ys, cx, cy, w, h):
    r = ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2
    return (r <= 1.0) & (r >= 0.55**2)


_RENDERERS = {
    "rectangle": _render_rectangle,
    "ellipse": _render_ellipse,
    "triangle": _render_triangle,
    "ring": _render_ring,
}


def mask_to_box(mask: np.ndarray) -> Box:
    """Tight box around the nonzero cells, in normalized cell-edge coordinates."""
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def _try_scene(rng: np.random.Generator, config: DataConfig) -> list[tuple[int, dict, np.ndarray]] | None:
    n = int(rng.integers(config.min_n, config.max_n + 1))
    xs, ys = _grid(config.canvas_size)
    placed: list[tuple[int, dict, np.ndarray]] = []
    boxes: list[Box] = []
    for _ in range(n):
        for _attempt in range(config.max_tries):
            cat = int(rng.integers(config.num_categories))
            spec = config.shapes[cat]
            size = rng.uniform(*spec.size_range)
            aspect = rng.uniform(*spec.aspect_range)
            w, h = size * np.sqrt(aspect), size / np.sqrt(aspect)
            if w >= 1.0 or h >= 1.0:
                continue
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            mask = _RENDERERS[spec.kind](xs, ys, cx, cy, w, h)
            if not mask.any():
                continue
            box = mask_to_box(mask)
            if any(iou(box, other) > config.max_overlap for other in boxes):
                continue
            params = {"cx": float(cx), "cy": float(cy), "w": float(w), "h": float(h)}
            placed.append((cat, params, mask))
            boxes.append(box)
            break
        else:
            return None
    return placed


def generate_scene(seed: int, config: DataConfig, scene_id: int = 0) -> Scene:
    """Render one scene. Identical ``(seed, config)`` gives identical output.

    Raises:
        PlacementError: if the overlap and size constraints cannot be met.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    for _ in range(config.max_tries):
        placed = _try_scene(rng, config)
        if placed is None:
            continue
        if config.visible_only:
            visible = []
            for i, (cat, params, mask) in enumerate(placed):
                m = mask.copy()
                for _, _, later in placed[i + 1 :]:
                    m &= ~later
                visible.append((cat, params, m))
            if not all(m.any() for _, _, m in visible):
                continue
            placed_masks = visible
        else:
            placed_masks = placed
        break
    else:
        raise PlacementError(f"could not place instances for seed {seed} after {config.max_tries} tries")

    s = config.canvas_size
    image = rng.normal(40.0, config.noise_std, size=(s, s, 3))
    for _cat, _params, mask in placed:
        colour = rng.uniform(90, 255, size=3)
        image[mask] = colour
    image += rng.normal(0.0, config.noise_std / 2, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    instances = [
        Instance(category=cat, box=mask_to_box(mask), mask=mask, shape_params=params)
        for cat, params, mask in placed_masks
    ]
    return Scene(scene_id=scene_id, canvas_size=s, image=image, instances=instances)


def generate_scenes(n: int, config: DataConfig, seed: int, start_id: int = 0) -> list[Scene]:
    """Generate ``n`` scenes; scene ``i`` is seeded from ``(seed, start_id + i)``."""
    out = []
    for i in range(start_id, start_id + n):
        sub = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(generate_scene(sub, config, scene_id=i))
    return out


# -- points ------------------------------------------------------------------


def sample_point(inst: Instance, mode: str, rng: np.random.Generator) -> PointAnnotation:
    """Draw a point annotation for one instance.

    ``mask`` picks a uniformly random nonzero mask cell and returns its centre,
    ``bbox`` draws uniformly inside the box, ``center`` returns the box centre.
    """
    if mode == "mask":
        h, w = inst.mask.shape
        flat = np.flatnonzero(inst.mask)
        k = int(flat[rng.integers(len(flat))])
        r, c = divmod(k, w)
        return PointAnnotation((c + 0.5) / w, (r + 0.5) / h, inst.category)
    x1, y1, x2, y2 = inst.box
    if mode == "bbox":
        return PointAnnotation(float(rng.uniform(x1, x2)), float(rng.uniform(y1, y2)), inst.category)
    if mode == "center":
        return PointAnnotation(float(0.5 * (x1 + x2)), float(0.5 * (y1 + y2)), inst.category)
    raise ValueError(f"unknown point mode {mode!r}; expected one of {POINT_MODES}")


def annotate_points(scenes: Sequence[Scene], mode: str, seed: int) -> dict[int, list[PointAnnotation]]:
    """One point per instance for every scene, keyed by scene id."""
    out = {}
    for scene in scenes:
        rng = np.random.default_rng([seed, scene.scene_id])
        out[scene.scene_id] = [sample_point(inst, mode, rng) for inst in scene.instances]
    return out


# -- splits ------------------------------------------------------------------


def split_dataset(scene_ids: Sequence[int], fraction: float, seed: int) -> DatasetSplit:
    """Random full/weak partition; the full set is a prefix of one shuffle.

    With a fixed seed, a larger fraction yields a superset of the smaller
    fraction's full set.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    ids = np.array(list(scene_ids))
    n_full = round(fraction * len(ids))
    if n_full == 0 or n_full == len(ids):
        raise ValueError(f"fraction {fraction} of {len(ids)} scenes leaves one side of the split empty")
    order = np.random.default_rng(seed).permutation(len(ids))
    full = tuple(sorted(int(i) for i in ids[order[:n_full]]))
    weak = tuple(sorted(int(i) for i in ids[order[n_full:]]))
    return DatasetSplit(full, weak, float(fraction), int(seed))


# -- serialization -----------------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO run-length encoding (column-major, zeros first)."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    vals = np.zeros(len(counts), dtype=bool)
    vals[1::2] = True
    flat = np.repeat(vals, counts)
    if flat.size != h * w:
        raise DatasetFormatError(f"run-length counts sum to {flat.size}, expected {h * w}")
    return flat.reshape((h, w), order="F")


def serialize_dataset(scenes: Sequence[Scene], split: DatasetSplit | None, path, config: DataConfig | None = None) -> Path:
    """Write ``annotations.json`` plus one PNG per scene under ``path``."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 0
    n_cat = config.num_categories if config else 1 + max((i.category for s in scenes for i in s.instances), default=0)
    names = config.category_names if config else [str(i) for i in range(n_cat)]
    for scene in scenes:
        s = scene.canvas_size
        fname = f"images/{scene.scene_id:06d}.png"
        Image.fromarray(scene.image).save(root / fname)
        images.append({"id": scene.scene_id, "file_name": fname, "width": s, "height": s})
        for inst in scene.instances:
            x1, y1, x2, y2 = inst.box
            rec = {
                "id": ann_id,
                "image_id": scene.scene_id,
                "category_id": int(inst.category),
                "bbox": [x1 * s, y1 * s, (x2 - x1) * s, (y2 - y1) * s],
                "area": float(inst.mask.sum()),
                "iscrowd": 0,
                "segmentation": rle_encode(inst.mask),
                "shape_params": inst.shape_params,
            }
            if inst.point is not None:
                rec["point"] = [inst.point.x * s, inst.point.y * s]
            annotations.append(rec)
            ann_id += 1
    doc = {
        "info": {"format_version": FORMAT_VERSION, "config": config.to_dict() if config else None},
        "images": images,
        "categories": [{"id": i, "name": n} for i, n in enumerate(names)],
        "annotations": annotations,
    }
    if split is not None:
        doc["split"] = {
            "fraction": split.fraction,
            "seed": split.seed,
            "full": list(split.full_set),
            "weak": list(split.weak_set),
        }
    tmp = root / "annotations.json.tmp"
    tmp.write_text(json.dumps(doc))
    os.replace(tmp, root / "annotations.json")
    return root


def _require(rec: dict, keys: Sequence[str], kind: str) -> None:
    missing = [k for k in keys if k not in rec]
    if missing:
        raise DatasetFormatError(f"{kind} record {rec.get('id', '?')} is missing field(s) {missing}")


def load_dataset(path) -> tuple[list[Scene], DatasetSplit | None]:
    """Inverse of :func:`serialize_dataset`.

    Raises:
        DatasetFormatError: on schema violations, naming the offending record.
    """
    root = Path(path)
    try:
        doc = json.loads((root / "annotations.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"no annotations.json under {root}") from None
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetFormatError(f"annotation file lacks top-level {key!r}")
    n_cat = len(doc["categories"])

    scenes: dict[int, Scene] = {}
    for rec in doc["images"]:
        _require(rec, ("id", "file_name", "width", "height"), "image")
        if rec["width"] != rec["height"]:
            raise DatasetFormatError(f"image record {rec['id']} is not square")
        img = np.asarray(Image.open(root / rec["file_name"]).convert("RGB"))
        if img.shape[:2] != (rec["height"], rec["width"]):
            raise DatasetFormatError(f"image record {rec['id']} has pixel shape {img.shape[:2]}")
        scenes[rec["id"]] = Scene(rec["id"], rec["width"], img, [])

    for rec in doc["annotations"]:
        _require(rec, ("id", "image_id", "category_id", "bbox", "segmentation"), "annotation")
        scene = scenes.get(rec["image_id"])
        if scene is None:
            raise DatasetFormatError(f"annotation record {rec['id']} refers to unknown image {rec['image_id']}")
        if not 0 <= rec["category_id"] < n_cat:
            raise DatasetFormatError(f"annotation record {rec['id']} has invalid category_id {rec['category_id']}")
        if len(rec["bbox"]) != 4 or min(rec["bbox"][2:]) < 0:
            raise DatasetFormatError(f"annotation record {rec['id']} has malformed bbox {rec['bbox']}")
        s = scene.canvas_size
        x, y, w, h = rec["bbox"]
        mask = rle_decode(rec["segmentation"])
        point = None
        if "point" in rec:
            point = PointAnnotation(rec["point"][0] / s, rec["point"][1] / s, rec["category_id"])
        scene.instances.append(
            Instance(
                category=rec["category_id"],
                box=Box(x / s, y / s, (x + w) / s, (y + h) / s),
                mask=mask,
                shape_params=rec.get("shape_params", {}),
                point=point,
            )
        )

    split = None
    if "split" in doc:
        sp = doc["split"]
        _require(sp, ("fraction", "seed", "full", "weak"), "split")
        split = DatasetSplit(tuple(sp["full"]), tuple(sp["weak"]), sp["fraction"], sp["seed"])
    return [scenes[k] for k in sorted(scenes)], split


def load_config(path) -> DataConfig:
    return DataConfig.from_dict(json.loads(Path(path).read_text()))
