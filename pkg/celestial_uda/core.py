"""Shared domain types, box geometry and tensor-shape contracts."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .const import SCALE_TAGS
from .exceptions import DegenerateEmbeddingError, ShapeMismatchError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized center format."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"Box center outside [0, 1]: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"Box size outside (0, 1]: ({self.w}, {self.h})")

    def corners(self) -> tuple[float, float, float, float]:
        """Return (x1, y1, x2, y2) in normalized coordinates."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def pixel_corners(self, size: int) -> tuple[float, float, float, float]:
        """Corners in pixels, clipped to a square image of the given size."""
        x1, y1, x2, y2 = self.corners()
        return (
            max(0.0, x1 * size),
            max(0.0, y1 * size),
            min(float(size), x2 * size),
            min(float(size), y2 * size),
        )


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: Box
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")


DetectionSet = list[Detection]


def validate_class_ids(detections: Sequence[Detection], class_count: int) -> None:
    """Raise if any detection refers to a class outside [0, class_count)."""
    for det in detections:
        if det.class_id >= class_count:
            raise ValueError(
                f"class_id {det.class_id} out of range for {class_count} classes"
            )


@dataclass(frozen=True)
class FeatureMap:
    """Rank-3 activation tensor (channels x height x width).

    `scale_tag` is None for backbone (global) features.
    """

    data: torch.Tensor
    scale_tag: str | None = None

    def __post_init__(self) -> None:
        if self.data.dim() != 3:
            raise ShapeMismatchError(
                f"FeatureMap must be rank 3, got shape {tuple(self.data.shape)}"
            )
        if min(self.data.shape) < 1:
            raise ShapeMismatchError(f"Empty FeatureMap: {tuple(self.data.shape)}")
        if self.scale_tag is not None and self.scale_tag not in SCALE_TAGS:
            raise ValueError(f"Unknown scale tag {self.scale_tag!r}")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class ScaleSet:
    """The (large, medium, small) instance feature maps of one image."""

    maps: tuple[FeatureMap, FeatureMap, FeatureMap]

    def __post_init__(self) -> None:
        if len(self.maps) != len(SCALE_TAGS):
            raise ShapeMismatchError(f"ScaleSet needs 3 maps, got {len(self.maps)}")
        for fmap, tag in zip(self.maps, SCALE_TAGS, strict=True):
            if fmap.scale_tag != tag:
                raise ValueError(f"Expected scale tag {tag!r}, got {fmap.scale_tag!r}")
        heights = [fmap.height for fmap in self.maps]
        if not heights[0] > heights[1] > heights[2]:
            raise ShapeMismatchError(
                f"ScaleSet resolutions must strictly decrease, got {heights}"
            )

    @classmethod
    def from_tensors(cls, tensors: Sequence[torch.Tensor]) -> ScaleSet:
        maps = tuple(
            FeatureMap(t, tag) for t, tag in zip(tensors, SCALE_TAGS, strict=True)
        )
        return cls(maps)  # type: ignore[arg-type]

    def tensors(self) -> tuple[torch.Tensor, ...]:
        return tuple(fmap.data for fmap in self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __len__(self) -> int:
        return len(self.maps)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes in normalized coordinates."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    inter_w = min(ax2, bx2) - max(ax1, bx1)
    inter_h = min(ay2, by2) - max(ay1, by1)
    if inter_w <= 0.0 or inter_h <= 0.0:
        return 0.0
    inter = inter_w * inter_h
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of corner-format boxes, shapes (N, 4) x (M, 4) -> (N, M)."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=1e-12)


def flatten(f: FeatureMap | torch.Tensor) -> torch.Tensor:
    """Flatten in (channel, row, column) order."""
    data = f.data if isinstance(f, FeatureMap) else f
    return data.reshape(-1)


def unflatten(
    vector: torch.Tensor, shape: tuple[int, int, int], scale_tag: str | None = None
) -> FeatureMap:
    """Inverse of `flatten` for a known (C, H, W) shape."""
    expected = shape[0] * shape[1] * shape[2]
    if vector.numel() != expected:
        raise ShapeMismatchError(
            f"Cannot reshape {vector.numel()} values into {shape}"
        )
    return FeatureMap(vector.reshape(shape), scale_tag)


def cosine_distance(u: Sequence[float] | np.ndarray, v: Sequence[float] | np.ndarray) -> float:
    """1 - cos(u, v); a single zero vector is maximally dissimilar (1.0)."""
    u_arr = np.asarray(u, dtype=np.float64).ravel()
    v_arr = np.asarray(v, dtype=np.float64).ravel()
    if u_arr.shape != v_arr.shape:
        raise ShapeMismatchError(f"Length mismatch: {u_arr.size} vs {v_arr.size}")
    nu = float(np.linalg.norm(u_arr))
    nv = float(np.linalg.norm(v_arr))
    if nu == 0.0 and nv == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding")
    if nu == 0.0 or nv == 0.0:
        return 1.0
    cos = float(np.dot(u_arr, v_arr)) / (nu * nv)
    return float(np.clip(1.0 - cos, 0.0, 2.0))


def pairwise_cosine_distances(x: np.ndarray) -> np.ndarray:
    """Vectorized `cosine_distance` over the rows of x, shape (N, N)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0.0
    if zero.sum() >= 2:
        raise DegenerateEmbeddingError("degenerate embedding")
    safe = np.where(zero, 1.0, norms)
    unit = x / safe[:, None]
    dist = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    np.fill_diagonal(dist, 0.0)
    return dist


def top_k_count(channels: int, keep_fraction: float) -> int:
    """K = ceil(keep_fraction * channels), robust to float round-off."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    return max(1, min(channels, math.ceil(keep_fraction * channels - 1e-9)))


@dataclass
class LossTerm:
    """A loss value plus how many of its parts were skipped for lack of input."""

    value: torch.Tensor
    skipped: int = 0

    def __float__(self) -> float:
        return float(self.value.detach())
