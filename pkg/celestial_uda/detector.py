"""Small anchor-free one-stage detector with backbone / neck / heads split.

Tap points: the backbone output (stride 8) is the global feature map;
the three smoothed neck outputs (strides 8, 16, 32) are the instance
features; one 1x1 head per scale emits, per cell,
(tx, ty, tw, th, objectness, class logits...).

Cell decoding for a grid of G_h x G_w cells:
    cx = (col + sigmoid(tx)) / G_w        w = exp(tw) / G_w
    cy = (row + sigmoid(ty)) / G_h        h = exp(th) / G_h
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .const import (
    DEFAULT_BACKBONE_CHANNELS,
    DEFAULT_INPUT_SIZE,
    DEFAULT_MAX_DETECTIONS,
    DEFAULT_NECK_CHANNELS,
    DEFAULT_STRIDES,
    SCALE_REFERENCE_CELLS,
)
from .core import Box, Detection, DetectionSet, FeatureMap, ScaleSet, box_iou_matrix
from .exceptions import ConfigError, DatasetIOError, ShapeMismatchError

_LOGGER = logging.getLogger(__name__)

BOX_CHANNELS = 4
OBJECTNESS_PRIOR = 0.01
# Centre offsets are learned through a sigmoid, which never reaches 0 or 1
OFFSET_EPS = 1e-3


@dataclass(frozen=True)
class DetectorConfig:
    class_count: int
    input_size: int = DEFAULT_INPUT_SIZE
    backbone_channels: int = DEFAULT_BACKBONE_CHANNELS
    # Ordered like ScaleSet: large, medium, small spatial maps
    neck_channels: tuple[int, int, int] = DEFAULT_NECK_CHANNELS
    strides: tuple[int, int, int] = DEFAULT_STRIDES

    def __post_init__(self) -> None:
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        s0, s1, s2 = self.strides
        if s0 < 2 or s0 & (s0 - 1) or s1 != 2 * s0 or s2 != 2 * s1:
            raise ConfigError(
                f"strides must be (s, 2s, 4s) with s a power of two, got {self.strides}"
            )
        if self.input_size % s2:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by stride {s2}"
            )
        if self.backbone_channels < 4 or min(self.neck_channels) < 1:
            raise ConfigError("channel counts too small")

    @property
    def grid_sizes(self) -> tuple[int, int, int]:
        return tuple(self.input_size // s for s in self.strides)  # type: ignore[return-value]

    @property
    def outputs_per_cell(self) -> int:
        return BOX_CHANNELS + 1 + self.class_count

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["neck_channels"] = list(self.neck_channels)
        data["strides"] = list(self.strides)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DetectorConfig:
        return cls(
            class_count=int(data["class_count"]),
            input_size=int(data["input_size"]),
            backbone_channels=int(data["backbone_channels"]),
            neck_channels=tuple(int(c) for c in data["neck_channels"]),  # type: ignore[arg-type]
            strides=tuple(int(s) for s in data["strides"]),  # type: ignore[arg-type]
        )


def _conv_block(c_in: int, c_out: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride, padding=kernel // 2, bias=False),
        nn.GroupNorm(math.gcd(8, c_out), c_out),
        nn.SiLU(),
    )


@dataclass
class DetectorOutput:
    """Batched forward products; index i selects one image."""

    global_features: torch.Tensor
    instance_features: tuple[torch.Tensor, ...]
    raw_predictions: tuple[torch.Tensor, ...]

    @property
    def batch_size(self) -> int:
        return int(self.global_features.shape[0])

    def global_map(self, index: int = 0) -> FeatureMap:
        return FeatureMap(self.global_features[index])

    def scale_set(self, index: int = 0) -> ScaleSet:
        return ScaleSet.from_tensors([t[index] for t in self.instance_features])

    def predictions(self, index: int = 0) -> tuple[torch.Tensor, ...]:
        return tuple(p[index] for p in self.raw_predictions)


class OneStageDetector(nn.Module):
    """Backbone (to stride 8), top-down neck, and one 1x1 head per scale."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.backbone_channels
        depth = int(math.log2(cfg.strides[0]))
        widths = [max(4, c // 2 ** (depth - 1 - k)) for k in range(depth)]
        widths[-1] = c
        stages = []
        c_in = 1
        for width in widths:
            stages.append(_conv_block(c_in, width, stride=2))
            c_in = width
        self.backbone = nn.Sequential(*stages)

        n_l, n_m, n_s = cfg.neck_channels
        self.down_medium = _conv_block(c, n_m, stride=2)
        self.down_small = _conv_block(n_m, n_s, stride=2)
        self.lateral_large = nn.Conv2d(c, n_l, 1)
        self.lateral_medium = nn.Conv2d(n_m, n_m, 1)
        self.reduce_small = nn.Conv2d(n_s, n_m, 1)
        self.reduce_medium = nn.Conv2d(n_m, n_l, 1)
        self.smooth = nn.ModuleList(
            [_conv_block(n_l, n_l), _conv_block(n_m, n_m), _conv_block(n_s, n_s)]
        )
        self.heads = nn.ModuleList(
            [nn.Conv2d(ch, cfg.outputs_per_cell, 1) for ch in cfg.neck_channels]
        )
        prior = math.log(OBJECTNESS_PRIOR / (1 - OBJECTNESS_PRIOR))
        for head in self.heads:
            nn.init.zeros_(head.bias)
            with torch.no_grad():
                head.bias[BOX_CHANNELS] = prior

    def forward(self, images: torch.Tensor) -> DetectorOutput:
        size = self.cfg.input_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (1, size, size):
            raise ShapeMismatchError(
                f"Expected images of shape (B, 1, {size}, {size}), got {tuple(images.shape)}"
            )
        g = self.backbone(images)
        d_medium = self.down_medium(g)
        d_small = self.down_small(d_medium)
        p_small = self.smooth[2](d_small)
        p_medium = self.smooth[1](
            self.lateral_medium(d_medium)
            + F.interpolate(self.reduce_small(p_small), scale_factor=2, mode="nearest")
        )
        p_large = self.smooth[0](
            self.lateral_large(g)
            + F.interpolate(self.reduce_medium(p_medium), scale_factor=2, mode="nearest")
        )
        features = (p_large, p_medium, p_small)
        raw = tuple(head(f) for head, f in zip(self.heads, features, strict=True))
        return DetectorOutput(global_features=g, instance_features=features, raw_predictions=raw)


def forward(model: OneStageDetector, image: np.ndarray | torch.Tensor) -> DetectorOutput:
    """Run the detector on one H x W grayscale image in [0, 1]."""
    dtype = next(model.parameters()).dtype
    tensor = torch.as_tensor(image, dtype=dtype)
    size = model.cfg.input_size
    if tuple(tensor.shape) != (size, size):
        raise ShapeMismatchError(
            f"Expected a {size}x{size} image, got {tuple(tensor.shape)}"
        )
    return model(tensor[None, None])


def assign_scale(box: Box, grid_sizes: Sequence[int]) -> int:
    """Scale whose cell size best matches the box: larger boxes go coarser."""
    side = max(box.w, box.h)
    errors = [abs(math.log(side * g / SCALE_REFERENCE_CELLS)) for g in grid_sizes]
    return int(np.argmin(errors))


@dataclass
class ScaleTargets:
    mask: torch.Tensor  # (B, H, W) bool
    box: torch.Tensor  # (B, 4, H, W) encoded offsets
    cls: torch.Tensor  # (B, C, H, W) one-hot


def encode_box(box: Box, grid: int) -> tuple[int, int, list[float]]:
    """Return (row, col, [ox, oy, log w, log h]) for a box on a square grid."""
    col = min(int(box.cx * grid), grid - 1)
    row = min(int(box.cy * grid), grid - 1)
    return row, col, [
        min(max(box.cx * grid - col, OFFSET_EPS), 1.0 - OFFSET_EPS),
        min(max(box.cy * grid - row, OFFSET_EPS), 1.0 - OFFSET_EPS),
        math.log(box.w * grid),
        math.log(box.h * grid),
    ]


def build_targets(
    ground_truth: Sequence[Sequence[Detection]],
    grid_sizes: Sequence[int],
    class_count: int,
) -> list[ScaleTargets]:
    batch = len(ground_truth)
    targets = [
        ScaleTargets(
            mask=torch.zeros(batch, g, g, dtype=torch.bool),
            box=torch.zeros(batch, BOX_CHANNELS, g, g),
            cls=torch.zeros(batch, class_count, g, g),
        )
        for g in grid_sizes
    ]
    for b, detections in enumerate(ground_truth):
        for det in detections:
            s = assign_scale(det.box, grid_sizes)
            row, col, enc = encode_box(det.box, grid_sizes[s])
            t = targets[s]
            if t.mask[b, row, col]:
                _LOGGER.debug("Cell (%d, %d) at scale %d already assigned", row, col, s)
                continue
            t.mask[b, row, col] = True
            t.box[b, :, row, col] = torch.tensor(enc)
            t.cls[b, det.class_id, row, col] = 1.0
    return targets


def supervised_loss_terms(
    raw_predictions: Sequence[torch.Tensor],
    ground_truth: Sequence[Sequence[Detection]],
) -> dict[str, torch.Tensor]:
    """Box (smooth-L1 on encoded offsets), objectness and class BCE terms.

    Box and class terms are averaged over assigned cells. Objectness is the
    mean over positive cells plus the mean over background cells.
    """
    class_count = raw_predictions[0].shape[1] - BOX_CHANNELS - 1
    grid_sizes = [int(p.shape[-1]) for p in raw_predictions]
    targets = build_targets(ground_truth, grid_sizes, class_count)
    zero = raw_predictions[0].sum() * 0.0
    box_sum, cls_sum, pos_sum, neg_sum = zero, zero, zero, zero
    n_pos = 0
    n_neg = 0
    for pred, tgt in zip(raw_predictions, targets, strict=True):
        tgt_box = tgt.box.to(pred)
        tgt_cls = tgt.cls.to(pred)
        mask = tgt.mask.to(pred.device)
        obj = F.binary_cross_entropy_with_logits(
            pred[:, BOX_CHANNELS], mask.to(pred.dtype), reduction="none"
        )
        pos_sum = pos_sum + obj[mask].sum()
        neg_sum = neg_sum + obj[~mask].sum()
        n_pos += int(mask.sum())
        n_neg += int((~mask).sum())
        if mask.any():
            cells = pred.permute(0, 2, 3, 1)[mask]  # (P, 5 + C)
            pred_enc = torch.cat([torch.sigmoid(cells[:, :2]), cells[:, 2:4]], dim=1)
            box_sum = box_sum + F.smooth_l1_loss(
                pred_enc, tgt_box.permute(0, 2, 3, 1)[mask], reduction="sum"
            )
            cls_sum = cls_sum + F.binary_cross_entropy_with_logits(
                cells[:, BOX_CHANNELS + 1 :],
                tgt_cls.permute(0, 2, 3, 1)[mask],
                reduction="sum",
            )
    denom = max(n_pos, 1)
    return {
        "box": box_sum / denom,
        "cls": cls_sum / denom,
        "obj": pos_sum / denom + neg_sum / max(n_neg, 1),
    }


def supervised_loss(
    raw_predictions: Sequence[torch.Tensor],
    ground_truth: Sequence[Sequence[Detection]],
) -> torch.Tensor:
    """Simplified one-stage supervised loss over a batch."""
    terms = supervised_loss_terms(raw_predictions, ground_truth)
    return terms["box"] + terms["obj"] + terms["cls"]


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS on corner boxes; suppresses IoU strictly above the threshold."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep: list[int] = []
    while order.numel():
        best = int(order[0])
        keep.append(best)
        if order.numel() == 1:
            break
        rest = order[1:]
        overlap = box_iou_matrix(boxes[best : best + 1], boxes[rest])[0]
        order = rest[overlap <= iou_threshold]
    return torch.tensor(keep, dtype=torch.long)


@torch.no_grad()
def decode(
    raw_predictions: Sequence[torch.Tensor],
    conf_threshold: float,
    nms_iou: float,
    max_detections: int = DEFAULT_MAX_DETECTIONS,
) -> DetectionSet:
    """Decode one image's per-scale grids, each shaped (5 + C, H, W)."""
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    corners, centers, scores, classes = [], [], [], []
    for pred in raw_predictions:
        pred = pred.detach().float()
        _, g_h, g_w = pred.shape
        obj = torch.sigmoid(pred[BOX_CHANNELS])
        cls_prob = torch.sigmoid(pred[BOX_CHANNELS + 1 :])
        conf, cls = (obj[None] * cls_prob).max(dim=0)
        rows, cols = torch.nonzero(conf >= conf_threshold, as_tuple=True)
        if rows.numel() == 0:
            continue
        cell = pred[:, rows, cols]
        cx = (cols + torch.sigmoid(cell[0])) / g_w
        cy = (rows + torch.sigmoid(cell[1])) / g_h
        w = (torch.exp(cell[2]) / g_w).clamp(1e-6, 1.0)
        h = (torch.exp(cell[3]) / g_h).clamp(1e-6, 1.0)
        corners.append(torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], 1))
        centers.append(torch.stack([cx, cy, w, h], 1))
        scores.append(conf[rows, cols])
        classes.append(cls[rows, cols])
    if not corners:
        return []
    all_boxes = torch.cat(corners)
    all_centers = torch.cat(centers)
    all_scores = torch.cat(scores)
    all_classes = torch.cat(classes)
    kept = []
    for c in torch.unique(all_classes).tolist():
        idx = torch.nonzero(all_classes == c, as_tuple=True)[0]
        kept.append(idx[nms(all_boxes[idx], all_scores[idx], nms_iou)])
    keep = torch.cat(kept)
    keep = keep[torch.argsort(all_scores[keep], descending=True, stable=True)]
    keep = keep[:max_detections]
    detections: DetectionSet = []
    for i in keep.tolist():
        cx, cy, w, h = all_centers[i].tolist()
        box = Box(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), w, h)
        detections.append(
            Detection(
                int(all_classes[i]),
                box,
                float(min(max(float(all_scores[i]), 0.0), 1.0)),
            )
        )
    return detections


@dataclass
class Checkpoint:
    detector: OneStageDetector
    train_config: dict[str, Any] = field(default_factory=dict)
    class_names: list[str] = field(default_factory=list)
    extra_state: dict[str, Any] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    detector: OneStageDetector,
    *,
    train_config: Mapping[str, Any] | None = None,
    class_names: Sequence[str] = (),
    extra_state: Mapping[str, Any] | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write parameters, DetectorConfig and run context into one torch file."""
    path = Path(path)
    payload = {
        "detector_config": detector.cfg.to_dict(),
        "detector": detector.state_dict(),
        "train_config": dict(train_config or {}),
        "class_names": list(class_names),
        "extra_state": dict(extra_state or {}),
        "metadata": dict(metadata or {}),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as err:
        raise DatasetIOError(f"Could not write checkpoint {path}: {err}") from err
    _LOGGER.debug("Checkpoint written to %s", path)
    return path


def load_checkpoint(path: str | Path, map_location: str = "cpu") -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except (OSError, RuntimeError) as err:
        raise DatasetIOError(f"Could not read checkpoint {path}: {err}") from err
    detector = OneStageDetector(DetectorConfig.from_dict(payload["detector_config"]))
    detector.load_state_dict(payload["detector"])
    detector.eval()
    return Checkpoint(
        detector=detector,
        train_config=payload.get("train_config", {}),
        class_names=payload.get("class_names", []),
        extra_state=payload.get("extra_state", {}),
        metadata=payload.get("metadata", {}),
    )
