"""Backbone + transformer detector with two query modes.

``point`` mode builds one decoder query per point annotation and regresses
the four side distances from the point, so each box contains its point.
``set`` mode uses a fixed set of learned queries with class and box heads,
including a no-object class, and is trained through bipartite matching.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import matcher
from .geometry import Box, OffsetQuad, PointAnnotation
from .point_encoder import PointEncoder, grid_positional_map

__all__ = [
    "ModelConfig",
    "Detection",
    "Checkpoint",
    "ModeError",
    "Detector",
    "build_model",
    "box_loss",
    "giou_loss_terms",
    "set_loss",
    "decode_offsets_t",
    "images_to_tensor",
]

CHECKPOINT_FORMAT = "pointquery-checkpoint"
CHECKPOINT_VERSION = 1


class ModeError(ValueError):
    """A forward pass was requested in the wrong query mode."""


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "point"  # point | set
    canvas_size: int = 64
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    backbone_strides: tuple[int, ...] = (2, 2, 2, 1)
    d_model: int = 64
    nheads: int = 4
    enc_layers: int = 1
    dec_layers: int = 2
    dim_feedforward: int = 128
    dropout: float = 0.0
    num_categories: int = 4
    num_queries: int = 25  # set mode only
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    class_weight: float = 1.0
    eos_coef: float = 0.1
    regression: str = "relative"  # relative | absolute (point mode)
    use_position: bool = True
    use_category: bool = True
    aux_loss: bool = False
    temperature: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(self.backbone_channels))
        object.__setattr__(self, "backbone_strides", tuple(self.backbone_strides))
        self.validate()

    @property
    def stride(self) -> int:
        return int(np.prod(self.backbone_strides))

    @property
    def feature_size(self) -> int:
        return self.canvas_size // self.stride

    def validate(self) -> None:
        if self.mode not in ("point", "set"):
            raise ValueError(f"mode must be 'point' or 'set', got {self.mode!r}")
        if self.regression not in ("relative", "absolute"):
            raise ValueError(f"regression must be 'relative' or 'absolute', got {self.regression!r}")
        if self.d_model % 4:
            raise ValueError(f"d_model must be divisible by 4, got {self.d_model}")
        if self.d_model % self.nheads:
            raise ValueError("d_model must be divisible by nheads")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone_channels and backbone_strides differ in length")
        if self.canvas_size % self.stride:
            raise ValueError(f"canvas_size {self.canvas_size} is not a multiple of stride {self.stride}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Detection:
    box: Box
    category: int
    score: float


# -- differentiable box terms -------------------------------------------------


def decode_offsets_t(points: Tensor, offsets: Tensor) -> Tensor:
    """Tensor form of :func:`geometry.decode_offsets`: (..., 2), (..., 4) -> (..., 4)."""
    x, y = points[..., 0], points[..., 1]
    l, t, r, b = offsets.unbind(-1)  # noqa: E741
    return torch.stack([x - l, y - t, x + r, y + b], dim=-1).clamp(0.0, 1.0)


def cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def giou_loss_terms(pred: Tensor, target: Tensor, eps: float = 1e-12) -> tuple[Tensor, Tensor]:
    """Elementwise IoU and GIoU for aligned box tensors of shape (..., 4)."""
    area_p = (pred[..., 2] - pred[..., 0]).clamp(min=0) * (pred[..., 3] - pred[..., 1]).clamp(min=0)
    area_t = (target[..., 2] - target[..., 0]).clamp(min=0) * (target[..., 3] - target[..., 1]).clamp(min=0)
    lt = torch.maximum(pred[..., :2], target[..., :2])
    rb = torch.minimum(pred[..., 2:], target[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_p + area_t - inter
    iou = inter / union.clamp(min=eps)
    elt = torch.minimum(pred[..., :2], target[..., :2])
    erb = torch.maximum(pred[..., 2:], target[..., 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[..., 0] * ewh[..., 1]
    return iou, iou - (enclose - union) / enclose.clamp(min=eps)


def box_loss(pred: Tensor, target: Tensor, l1_weight: float = 5.0, giou_weight: float = 2.0) -> Tensor:
    """Per-box regression loss ``l1_weight * L1 + giou_weight * (1 - GIoU)``."""
    l1 = (pred - target).abs().sum(-1)
    _, g = giou_loss_terms(pred, target)
    return l1_weight * l1 + giou_weight * (1.0 - g)


def set_loss(
    logits: Tensor,
    pred_boxes: Tensor,
    target_classes: Tensor,
    target_boxes: Tensor,
    assignment,
    *,
    l1_weight: float = 5.0,
    giou_weight: float = 2.0,
    class_weight: float = 1.0,
    eos_coef: float = 0.1,
) -> Tensor:
    """Summed set-prediction loss for one image.

    Args:
        logits: (Q, C+1); the last class is "no object".
        pred_boxes: (Q, 4) corner boxes.
        target_classes: (T,) labels.
        target_boxes: (T, 4) boxes.
        assignment: length-T sequence, target ``i`` -> query ``assignment[i]``.

    Matched queries pay class NLL plus :func:`box_loss`; every other query
    pays ``eos_coef`` times the no-object NLL.
    """
    q, c1 = logits.shape
    cols = np.asarray(assignment, dtype=int).reshape(-1)
    t = int(target_classes.shape[0])
    if cols.shape[0] != t:
        raise ValueError(f"assignment has {cols.shape[0]} entries for {t} targets")
    if t and (cols.min() < 0 or cols.max() >= q):
        raise ValueError("assignment refers to a query index out of range")
    if len(set(cols.tolist())) != t:
        raise ValueError("assignment is not injective")
    logp = F.log_softmax(logits, dim=-1)
    labels = torch.full((q,), c1 - 1, dtype=torch.long)
    idx = torch.as_tensor(cols, dtype=torch.long)
    labels[idx] = target_classes.long()
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    weights = torch.full((q,), eos_coef, dtype=logits.dtype)
    weights[idx] = class_weight
    total = (weights * nll).sum()
    if t:
        total = total + box_loss(pred_boxes[idx], target_boxes, l1_weight, giou_weight).sum()
    return total


# -- network -----------------------------------------------------------------


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, num_layers: int):
        super().__init__()
        dims = [d_in] + [d_hidden] * (num_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Backbone(nn.Module):
    def __init__(self, channels: Sequence[int], strides: Sequence[int]):
        super().__init__()
        blocks = []
        c_in = 3
        for c, s in zip(channels, strides):
            blocks += [
                nn.Conv2d(c_in, c, 3, stride=s, padding=1, bias=False),
                nn.GroupNorm(min(8, c), c),
                nn.ReLU(inplace=True),
                nn.Conv2d(c, c, 3, padding=1, bias=False),
                nn.GroupNorm(min(8, c), c),
                nn.ReLU(inplace=True),
            ]
            c_in = c
        self.body = nn.Sequential(*blocks)
        self.out_channels = c_in

    def forward(self, x):
        return self.body(x)


class EncoderLayer(nn.Module):
    def __init__(self, d, nheads, dff, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(d, nheads, dropout=dropout, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, dff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(dff, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, src, pos):
        q = src + pos
        src = self.norm1(src + self.drop(self.attn(q, q, src, need_weights=False)[0]))
        return self.norm2(src + self.drop(self.ff(src)))


class DecoderLayer(nn.Module):
    def __init__(self, d, nheads, dff, dropout):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, nheads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, nheads, dropout=dropout, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, dff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(dff, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, tgt, query_pos, memory, pos, query_padding=None):
        q = tgt + query_pos
        sa = self.self_attn(q, q, tgt, key_padding_mask=query_padding, need_weights=False)[0]
        tgt = self.norm1(tgt + self.drop(sa))
        ca = self.cross_attn(tgt + query_pos, memory + pos, memory, need_weights=False)[0]
        tgt = self.norm2(tgt + self.drop(ca))
        return self.norm3(tgt + self.drop(self.ff(tgt)))


class Detector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.backbone = Backbone(config.backbone_channels, config.backbone_strides)
        self.input_proj = nn.Conv2d(self.backbone.out_channels, d, 1)
        fs = config.feature_size
        self.register_buffer("pos_map", grid_positional_map(fs, fs, d, config.temperature), persistent=False)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.nheads, config.dim_feedforward, config.dropout) for _ in range(config.enc_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.nheads, config.dim_feedforward, config.dropout) for _ in range(config.dec_layers)
        )
        self.decoder_norm = nn.LayerNorm(d)
        if config.mode == "point":
            self.point_encoder = PointEncoder(
                d, config.num_categories, config.temperature, config.use_position, config.use_category
            )
            self.box_head = MLP(d, d, 4, 3)
            # start from small boxes around the point
            nn.init.constant_(self.box_head.layers[-1].bias, -1.5)
        else:
            self.query_embed = nn.Embedding(config.num_queries, d)
            self.class_head = nn.Linear(d, config.num_categories + 1)
            self.box_head = MLP(d, d, 4, 3)

    # -- shared trunk ---------------------------------------------------------

    def backbone_forward(self, images: Tensor) -> Tensor:
        s = self.config.canvas_size
        if images.ndim != 4 or tuple(images.shape[-2:]) != (s, s) or images.shape[1] != 3:
            raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(images.shape)}")
        return self.backbone(images)

    def encode(self, images: Tensor) -> Tensor:
        feats = self.input_proj(self.backbone_forward(images))
        memory = feats.flatten(2).transpose(1, 2)
        pos = self.pos_map.to(memory.dtype)[None].expand_as(memory)
        for layer in self.encoder:
            memory = layer(memory, pos)
        return memory

    def decode(
        self, memory: Tensor, query_pos: Tensor, query_padding: Tensor | None = None, tgt: Tensor | None = None
    ) -> list[Tensor]:
        pos = self.pos_map.to(memory.dtype)[None].expand_as(memory)
        if tgt is None:
            tgt = torch.zeros_like(query_pos)
        outs = []
        for layer in self.decoder:
            tgt = layer(tgt, query_pos, memory, pos, query_padding)
            outs.append(self.decoder_norm(tgt))
        return outs

    # -- point mode -----------------------------------------------------------

    def _require(self, mode: str) -> None:
        if self.config.mode != mode:
            raise ModeError(f"model is in {self.config.mode!r} mode, {mode!r} forward requested")

    def _point_boxes(self, hs: Tensor, xy: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.box_head(hs)
        if self.config.regression == "relative":
            offsets = raw.sigmoid()
            return offsets, decode_offsets_t(xy, offsets)
        cxcywh = raw.sigmoid()
        return cxcywh, cxcywh_to_xyxy(cxcywh).clamp(0.0, 1.0)

    def forward_points(self, images: Tensor, xy: Tensor, categories: Tensor, valid: Tensor | None = None) -> dict:
        """Batched point-mode forward.

        Args:
            images: (B, 3, S, S) float.
            xy: (B, N, 2) normalized points, padded.
            categories: (B, N) long.
            valid: (B, N) bool, False on padding.

        Returns:
            ``raw`` (B, N, 4) head outputs before the squashing nonlinearity,
            ``offsets`` (B, N, 4), ``boxes`` (B, N, 4) corner boxes, and
            ``aux`` with one (offsets, boxes) pair per earlier decoder layer.
        """
        self._require("point")
        memory = self.encode(images)
        queries = self.point_encoder(xy, categories)
        padding = None
        if valid is not None:
            padding = ~valid.bool()
            # an image without points would mask every key; keep one slot live
            padding[:, 0] = False
        # point queries carry instance content, so they also seed the decoder input
        outs = self.decode(memory, queries, padding, tgt=queries)
        offsets, boxes = self._point_boxes(outs[-1], xy)
        aux = [self._point_boxes(h, xy) for h in outs[:-1]] if self.config.aux_loss else []
        return {"offsets": offsets, "boxes": boxes, "aux": aux}

    @torch.no_grad()
    def point_detr_forward(self, image, points: Sequence[PointAnnotation]) -> tuple[list[OffsetQuad], list[Box]]:
        """Single-image inference: one offset quad and one box per point, in order."""
        self._require("point")
        if len(points) == 0:
            return [], []
        images = images_to_tensor([image], self.config.canvas_size)
        xy = torch.tensor([[[float(p[0]), float(p[1])] for p in points]])
        cats = torch.tensor([[int(p[2]) for p in points]], dtype=torch.long)
        out = self.forward_points(images, xy, cats)
        offs = out["offsets"][0].double().numpy()
        boxes = out["boxes"][0].double().numpy()
        return [OffsetQuad(*map(float, o)) for o in offs], [Box(*map(float, b)) for b in boxes]

    # -- set mode -------------------------------------------------------------

    def forward_set(self, images: Tensor) -> dict:
        """Returns ``logits`` (B, Q, C+1), ``boxes`` (B, Q, 4) and ``aux``."""
        self._require("set")
        memory = self.encode(images)
        query_pos = self.query_embed.weight[None].expand(images.shape[0], -1, -1)
        outs = self.decode(memory, query_pos)

        def heads(h):
            return self.class_head(h), cxcywh_to_xyxy(self.box_head(h).sigmoid()).clamp(0.0, 1.0)

        logits, boxes = heads(outs[-1])
        aux = [heads(h) for h in outs[:-1]] if self.config.aux_loss else []
        return {"logits": logits, "boxes": boxes, "aux": aux}

    @torch.no_grad()
    def detr_forward(self, image) -> tuple[np.ndarray, np.ndarray]:
        """Single-image inference: (Q, C+1) class probabilities and (Q, 4) boxes."""
        self._require("set")
        out = self.forward_set(images_to_tensor([image], self.config.canvas_size))
        probs = out["logits"][0].softmax(-1).double().numpy()
        return probs, out["boxes"][0].double().numpy()

    def match(self, logits: Tensor, boxes: Tensor, target_classes, target_boxes) -> np.ndarray:
        """Optimal target -> query assignment for one image."""
        cfg = self.config
        with torch.no_grad():
            probs = logits.softmax(-1).double().numpy()
            costs = matcher.cost_matrix(
                probs, boxes.double().numpy(), np.asarray(target_classes), np.asarray(target_boxes),
                cfg.l1_weight, cfg.giou_weight,
            )
        return matcher.hungarian(costs)


def images_to_tensor(images, canvas_size: int | None = None) -> Tensor:
    """Stack (H, W, 3) uint8 arrays into a (B, 3, H, W) float tensor in [-0.5, 0.5]."""
    arr = np.stack([np.asarray(im) for im in images])
    if canvas_size is not None and arr.shape[1:3] != (canvas_size, canvas_size):
        raise ValueError(f"expected {canvas_size}x{canvas_size} images, got {arr.shape[1:3]}")
    t = torch.from_numpy(arr).permute(0, 3, 1, 2).float()
    return t / 255.0 - 0.5


def build_model(config: ModelConfig, seed: int = 0) -> Detector:
    torch.manual_seed(seed)
    return Detector(config)


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    """Trained parameters plus the config needed to rebuild the model.

    On disk this is a ``torch.save`` archive holding a dict with keys
    ``format``, ``version``, ``config``, ``state_dict`` and ``meta``.
    """

    model: Detector
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "config": self.config.to_dict(),
                "state_dict": state,
                "meta": json.loads(json.dumps(self.meta)),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
        model = Detector(ModelConfig.from_dict(blob["config"]))
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return cls(model, blob.get("meta", {}))
