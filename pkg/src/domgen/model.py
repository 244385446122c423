"""RetinaNet-style detector with a gradient-reversal domain discriminator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .data import ObjectAnnotation, ObjectKind

CHECKPOINT_FORMAT = "domgen-ckpt-v1"
FPN_STRIDES = (8, 16, 32)


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class ModelConfig:
    encoder_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    fpn_channels: int = 64
    head_depth: int = 2
    anchor_scales: list[float] = field(default_factory=lambda: [1.0, 2 ** (1 / 3), 2 ** (2 / 3)])
    anchor_ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    anchor_base: float = 4.0
    num_anchors_per_cell: int | None = None
    num_domains: int = 4
    discriminator_channels: int = 64
    dropout_p: float = 0.5
    patch_size: int = 128
    hard_negative_class: bool = False

    def __post_init__(self):
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        self.anchor_scales = [float(s) for s in self.anchor_scales]
        self.anchor_ratios = [float(r) for r in self.anchor_ratios]
        n = len(self.anchor_scales) * len(self.anchor_ratios)
        if self.num_anchors_per_cell is None:
            self.num_anchors_per_cell = n
        if self.num_anchors_per_cell != n:
            raise ConfigError(f"num_anchors_per_cell={self.num_anchors_per_cell} but scales x ratios = {n}")
        if len(self.encoder_widths) < 4:
            raise ConfigError("encoder_widths needs at least 4 stages (stem stage plus three FPN taps)")
        if self.num_domains < 2:
            raise ConfigError("num_domains must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.patch_size % self.total_stride:
            raise ConfigError(f"patch_size {self.patch_size} not divisible by encoder stride {self.total_stride}")

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.encoder_widths) + 1)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.total_stride // 2 ** i for i in (2, 1, 0))

    @property
    def num_classes(self) -> int:
        """Class-logit width, background included."""
        return 3 if self.hard_negative_class else 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# gradient reversal


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, alpha):
        ctx.alpha = alpha
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.alpha, None


def gradient_reversal(x: torch.Tensor, alpha: float) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-alpha``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return _GradientReversal.apply(x, float(alpha))


# --------------------------------------------------------------------------
# network


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + idt)


class Encoder(nn.Module):
    """Residual stack: stride-2 stem then one stride-2 block per stage."""

    def __init__(self, widths):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, 2, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()
        )
        cins = [widths[0]] + list(widths[:-1])
        self.stages = nn.ModuleList(BasicBlock(ci, co, 2) for ci, co in zip(cins, widths))

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FPN(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, 1, 1) for _ in in_channels)

    def forward(self, feats):
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        outs = [lat[-1]]
        for f in reversed(lat[:-1]):
            outs.insert(0, f + F.interpolate(outs[0], size=f.shape[-2:], mode="nearest"))
        return [o(p) for o, p in zip(self.output, outs)]


def _subnet(channels, depth, out):
    layers = []
    for _ in range(depth):
        layers += [nn.Conv2d(channels, channels, 3, 1, 1), nn.ReLU()]
    layers.append(nn.Conv2d(channels, out, 3, 1, 1))
    return nn.Sequential(*layers)


class DomainDiscriminator(nn.Module):
    """Three conv-BN-ReLU-dropout blocks, global average pooling, linear."""

    def __init__(self, in_channels, channels, num_domains, dropout_p):
        super().__init__()
        blocks = []
        c = in_channels
        for _ in range(3):
            blocks += [
                nn.Conv2d(c, channels, 3, 1, 1, bias=False),
                nn.BatchNorm2d(channels),
                nn.ReLU(),
                nn.Dropout(dropout_p),
            ]
            c = channels
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(channels, num_domains)

    def forward(self, features):
        return self.fc(self.pool(self.blocks(features)).flatten(1))


def discriminator_forward(features: torch.Tensor, discriminator: DomainDiscriminator) -> torch.Tensor:
    return discriminator(features)


class DetectorOutput(NamedTuple):
    class_logits: torch.Tensor  # (B, N_anchors, num_classes)
    box_deltas: torch.Tensor  # (B, N_anchors, 4)
    domain_logits: torch.Tensor  # (B, num_domains)
    features: torch.Tensor  # bottleneck map before the reversal layer


class DetectorModel(nn.Module):
    """Encoder + FPN + class/box subnets + bottleneck domain discriminator.

    Per-anchor outputs are flattened level-major, then row-major over cells,
    then over the anchors of a cell, the same order as :func:`generate_anchors`.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.encoder_widths
        self.encoder = Encoder(w)
        self.fpn = FPN(w[-3:], config.fpn_channels)
        a, k = config.num_anchors_per_cell, config.num_classes
        self.class_subnet = _subnet(config.fpn_channels, config.head_depth, a * k)
        self.box_subnet = _subnet(config.fpn_channels, config.head_depth, a * 4)
        self.discriminator = DomainDiscriminator(
            w[-1], config.discriminator_channels, config.num_domains, config.dropout_p
        )
        # foreground prior of 0.01 at init
        bias = self.class_subnet[-1].bias.data.view(a, k)
        bias.zero_()
        bias[:, 0] = math.log(0.99 / 0.01)
        nn.init.normal_(self.class_subnet[-1].weight, std=0.01)
        nn.init.normal_(self.box_subnet[-1].weight, std=0.01)
        nn.init.zeros_(self.box_subnet[-1].bias)

    def forward(self, x: torch.Tensor, alpha: float = 0.0, detach_domain: bool = False) -> DetectorOutput:
        h, w = x.shape[-2:]
        s = self.config.total_stride
        if h % s or w % s:
            raise ConfigError(f"input {h}x{w} not divisible by encoder stride {s}")
        feats = self.encoder(x)
        bottleneck = feats[-1]
        pyramid = self.fpn(feats[-3:])
        k = self.config.num_classes
        b = x.shape[0]
        cls = [self.class_subnet(p).permute(0, 2, 3, 1).reshape(b, -1, k) for p in pyramid]
        box = [self.box_subnet(p).permute(0, 2, 3, 1).reshape(b, -1, 4) for p in pyramid]
        dom_in = bottleneck.detach() if detach_domain else gradient_reversal(bottleneck, alpha)
        domain_logits = self.discriminator(dom_in)
        return DetectorOutput(torch.cat(cls, 1), torch.cat(box, 1), domain_logits, bottleneck)

    def head_parameters(self):
        return list(self.class_subnet.parameters()) + list(self.box_subnet.parameters())


def forward(model: DetectorModel, batch, alpha: float = 0.0, detach_domain: bool = False) -> DetectorOutput:
    """Run the model on a B x H x W x 3 uint8/float batch or a prepared NCHW tensor."""
    if not isinstance(batch, torch.Tensor):
        batch = images_to_tensor(batch)
    return model(batch, alpha, detach_domain)


def images_to_tensor(images, normalize: bool = False, dtype=torch.float32) -> torch.Tensor:
    """Stack HxWx3 uint8 arrays into an NCHW tensor scaled to [0, 1].

    With ``normalize`` each image is standardized per channel instead.
    """
    stacked = np.stack([np.asarray(im) for im in images])
    arr = stacked.astype(np.float64)
    if stacked.dtype == np.uint8:
        arr /= 255.0
    if normalize:
        arr = normalize_channels(arr)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def normalize_channels(arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-image, per-channel zero-mean unit-variance standardization of B x H x W x C data."""
    mean = arr.mean(axis=(1, 2), keepdims=True)
    std = arr.std(axis=(1, 2), keepdims=True)
    return (arr - mean) / (std + eps)


# --------------------------------------------------------------------------
# anchors


@dataclass(frozen=True)
class Anchor:
    center: tuple[float, float]
    width: float
    height: float
    level: int


class AnchorSet:
    """Anchor boxes as arrays, xyxy in ``boxes`` and pyramid level in ``levels``."""

    def __init__(self, boxes: np.ndarray, levels: np.ndarray):
        self.boxes = boxes
        self.levels = levels
        boxes.setflags(write=False)
        levels.setflags(write=False)

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, i) -> Anchor:
        x0, y0, x1, y1 = self.boxes[i]
        return Anchor(((x0 + x1) / 2, (y0 + y1) / 2), x1 - x0, y1 - y0, int(self.levels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        return (
            isinstance(other, AnchorSet)
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.levels, other.levels)
        )

    @property
    def cxcywh(self) -> np.ndarray:
        b = self.boxes
        return np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2, b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], 1)


@lru_cache(maxsize=32)
def _anchors(image_w, image_h, strides, scales, ratios, base):
    boxes, levels = [], []
    for level, stride in enumerate(strides):
        shapes = []
        for scale in scales:
            for ratio in ratios:
                size = base * stride * scale
                shapes.append((size / math.sqrt(ratio), size * math.sqrt(ratio)))
        shapes = np.asarray(shapes)
        ys, xs = np.mgrid[0 : image_h // stride, 0 : image_w // stride]
        cx = (xs.ravel() + 0.5) * stride
        cy = (ys.ravel() + 0.5) * stride
        w = np.broadcast_to(shapes[None, :, 0], (len(cx), len(shapes)))
        h = np.broadcast_to(shapes[None, :, 1], (len(cx), len(shapes)))
        b = np.stack([cx[:, None] - w / 2, cy[:, None] - h / 2, cx[:, None] + w / 2, cy[:, None] + h / 2], -1)
        boxes.append(b.reshape(-1, 4))
        levels.append(np.full(len(boxes[-1]), level))
    return AnchorSet(np.concatenate(boxes), np.concatenate(levels))


def generate_anchors(config: ModelConfig, image_size: int | tuple[int, int] | None = None) -> AnchorSet:
    """Tile every pyramid level's stride grid with scales x ratios anchors."""
    if image_size is None:
        image_size = config.patch_size
    w, h = (image_size, image_size) if isinstance(image_size, int) else image_size
    return _anchors(
        int(w), int(h), config.strides, tuple(config.anchor_scales), tuple(config.anchor_ratios), config.anchor_base
    )


# --------------------------------------------------------------------------
# target assignment and decoding


def _annotation_arrays(annotations: Sequence[ObjectAnnotation], hard_negative_class: bool):
    boxes, labels = [], []
    for a in annotations:
        if a.kind is ObjectKind.MITOSIS:
            labels.append(1)
        elif hard_negative_class:
            labels.append(2)
        else:
            continue
        boxes.append(a.box)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64)


def encode_targets(
    anchors,
    annotations: Sequence[ObjectAnnotation],
    iou_pos: float = 0.5,
    iou_neg: float = 0.4,
    hard_negative_class: bool = False,
):
    """Assign every anchor to background, an object, or ignore.

    Returns ``(class_targets, box_delta_targets, anchor_mask)``: class index per
    anchor (0 = background), regression targets (zeros off-positive) and a mask
    that is False for anchors in the ignore band between the thresholds.
    Hard negatives are left out unless ``hard_negative_class`` is set.
    """
    if not iou_neg < iou_pos:
        raise ValueError("iou_neg must be smaller than iou_pos")
    abox = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(abox)
    cls = np.zeros(n, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    mask = np.ones(n, dtype=bool)
    gt, labels = _annotation_arrays(annotations, hard_negative_class)
    if not len(gt):
        return cls, deltas, mask
    iou = kernels.iou_matrix(abox, gt)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best]
    pos = best_iou >= iou_pos
    mask[(best_iou >= iou_neg) & ~pos] = False
    cls[pos] = labels[best[pos]]
    deltas[pos] = box_to_deltas(abox[pos], gt[best[pos]])
    return cls, deltas, mask


def box_to_deltas(anchor_boxes: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    aw = anchor_boxes[:, 2] - anchor_boxes[:, 0]
    ah = anchor_boxes[:, 3] - anchor_boxes[:, 1]
    ax = anchor_boxes[:, 0] + aw / 2
    ay = anchor_boxes[:, 1] + ah / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    x = boxes[:, 0] + w / 2
    y = boxes[:, 1] + h / 2
    return np.stack([(x - ax) / aw, (y - ay) / ah, np.log(w / aw), np.log(h / ah)], 1)


def deltas_to_box(anchor_boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchor_boxes[:, 2] - anchor_boxes[:, 0]
    ah = anchor_boxes[:, 3] - anchor_boxes[:, 1]
    ax = anchor_boxes[:, 0] + aw / 2
    ay = anchor_boxes[:, 1] + ah / 2
    x = ax + deltas[:, 0] * aw
    y = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -10, 10))
    h = ah * np.exp(np.clip(deltas[:, 3], -10, 10))
    return np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], 1)


@dataclass
class DetectionSet:
    boxes: np.ndarray  # (n, 4) xyxy
    scores: np.ndarray  # (n,) descending
    image_ref: str = ""

    def __len__(self):
        return len(self.scores)

    @property
    def centers(self) -> np.ndarray:
        b = self.boxes.reshape(-1, 4)
        return np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2], 1)

    @classmethod
    def empty(cls, image_ref: str = "") -> "DetectionSet":
        return cls(np.zeros((0, 4)), np.zeros(0), image_ref)

    def above(self, threshold: float) -> "DetectionSet":
        keep = self.scores >= threshold
        return DetectionSet(self.boxes[keep], self.scores[keep], self.image_ref)

    def to_records(self) -> list[dict]:
        return [
            {"x0": float(b[0]), "y0": float(b[1]), "x1": float(b[2]), "y1": float(b[3]), "score": float(s)}
            for b, s in zip(self.boxes, self.scores)
        ]

    @classmethod
    def from_records(cls, records, image_ref: str = "") -> "DetectionSet":
        if not records:
            return cls.empty(image_ref)
        boxes = np.array([[r["x0"], r["y0"], r["x1"], r["y1"]] for r in records], dtype=np.float64)
        scores = np.array([r["score"] for r in records], dtype=np.float64)
        order = np.argsort(-scores, kind="stable")
        return cls(boxes[order], scores[order], image_ref)


def class_scores(class_logits) -> np.ndarray:
    """Mitosis probability per anchor; with two classes this is sigmoid(l1 - l0)."""
    logits = torch.as_tensor(class_logits)
    return torch.softmax(logits.double(), dim=-1)[..., 1].cpu().numpy()


def decode_and_nms(
    class_logits,
    box_deltas,
    anchors,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 100,
    image_ref: str = "",
) -> DetectionSet:
    """Threshold, decode and greedily suppress one image's anchor predictions.

    ``class_logits`` is (N, K) raw logits, or (N,) already-computed scores.
    """
    if not (0.0 <= score_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    logits = np.asarray(class_logits.detach().cpu() if isinstance(class_logits, torch.Tensor) else class_logits)
    scores = class_scores(logits) if logits.ndim == 2 else logits.astype(np.float64)
    deltas = np.asarray(box_deltas.detach().cpu() if isinstance(box_deltas, torch.Tensor) else box_deltas, np.float64)
    abox = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    keep = np.nonzero(scores >= score_threshold)[0]
    if not len(keep):
        return DetectionSet.empty(image_ref)
    boxes = deltas_to_box(abox[keep], deltas[keep])
    sc = scores[keep]
    kept = kernels.nms(boxes, sc, nms_iou)[:max_detections]
    return DetectionSet(boxes[kept], sc[kept], image_ref)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: DetectorModel, *, epoch: int = 0, alpha_progress: float = 0.0, extra=None) -> Path:
    """Write parameters and buffers plus JSON metadata into one ``.npz`` archive."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "epoch": int(epoch),
        "alpha_progress": float(alpha_progress),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[DetectorModel, dict]:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        state = {k[len("param/"):]: torch.from_numpy(npz[k].copy()) for k in npz.files if k.startswith("param/")}
    model = DetectorModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta
