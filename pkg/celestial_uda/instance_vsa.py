"""Instance-clustering alignment.

Per-detection crops are pooled from their assigned scale, optionally reduced
to their strongest channels, flattened to embeddings and grouped by
complete-linkage cosine agglomeration. Group means are then aligned either
adversarially or with a max-margin contrastive loss.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from .clustering import agglomerate_by_threshold
from .const import (
    DEFAULT_ATTENTION_KERNEL,
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_GRL_LAMBDA,
    DEFAULT_KEEP_FRACTION,
    DEFAULT_MARGIN,
    DEFAULT_MAX_INSTANCES,
    DEFAULT_MERGE_THRESHOLD,
    DEFAULT_NMS_IOU,
    DEFAULT_POOL_SIZE,
    DOMAIN_SOURCE,
    DOMAIN_TARGET,
)
from .core import Box, DetectionSet, FeatureMap, LossTerm, ScaleSet, flatten, top_k_count
from .detector import assign_scale, decode
from .exceptions import DegenerateEmbeddingError, ShapeMismatchError
from .global_align import (
    DOMAIN_LABEL_SOURCE,
    DOMAIN_LABEL_TARGET,
    VectorDiscriminator,
    adv_loss,
    grl,
)

_LOGGER = logging.getLogger(__name__)

INSTANCE_MODE_ADVERSARIAL = "adversarial"
INSTANCE_MODE_CONTRASTIVE = "contrastive"
INSTANCE_MODES = (INSTANCE_MODE_ADVERSARIAL, INSTANCE_MODE_CONTRASTIVE)

MIN_INSTANCES_PER_DOMAIN = 2


@dataclass
class InstanceEmbedding:
    z: torch.Tensor
    domain: str = DOMAIN_SOURCE
    scale_index: int = 0


@dataclass
class InstanceCrops:
    crops: list[FeatureMap] = field(default_factory=list)
    scale_indices: list[int] = field(default_factory=list)
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.crops)


@dataclass
class ChannelRanking:
    weights: torch.Tensor  # (C,) in (0, 1)
    order: torch.Tensor  # channel indices, weight descending

    @classmethod
    def from_weights(cls, weights: torch.Tensor | Sequence[float]) -> ChannelRanking:
        weights = torch.as_tensor(weights)
        order = torch.argsort(weights.detach(), descending=True, stable=True)
        return cls(weights=weights, order=order)


@dataclass
class ClusterAssignment:
    labels: list[int]
    representatives: torch.Tensor  # (G, m)

    @property
    def group_count(self) -> int:
        return int(self.representatives.shape[0])


def _clipped_corners(box: Box) -> tuple[float, float, float, float] | None:
    x1, y1, x2, y2 = (min(max(v, 0.0), 1.0) for v in box.corners())
    if x2 <= x1 or y2 <= y1:
        return None
    return x1, y1, x2, y2


def extract_instances(
    features: ScaleSet,
    detections: DetectionSet,
    pool_size: int = DEFAULT_POOL_SIZE,
) -> InstanceCrops:
    """Pool every detection's region on its assigned scale to a P x P crop.

    Uses aligned RoIAlign, so cell centers sit at half-integer coordinates
    and partially covered cells are interpolated. A box aligned to whole
    cells with P=1 yields the mean of those cells. Boxes with no area left
    after clipping to the image are dropped and counted.
    """
    if pool_size < 1:
        raise ValueError(f"pool_size must be >= 1, got {pool_size}")
    grid_sizes = [fmap.height for fmap in features]
    result = InstanceCrops()
    for det in detections:
        corners = _clipped_corners(det.box)
        if corners is None:
            result.dropped += 1
            continue
        s = assign_scale(det.box, grid_sizes)
        fmap = features.maps[s]
        x1, y1, x2, y2 = corners
        roi = fmap.data.new_tensor(
            [[0.0, x1 * fmap.width, y1 * fmap.height, x2 * fmap.width, y2 * fmap.height]]
        )
        pooled = roi_align(
            fmap.data[None], roi, output_size=pool_size, spatial_scale=1.0, aligned=True
        )[0]
        result.crops.append(FeatureMap(pooled, fmap.scale_tag))
        result.scale_indices.append(s)
    if result.dropped:
        _LOGGER.warning("Dropped %d degenerate instance boxes", result.dropped)
    return result


def channel_attention(f: FeatureMap | torch.Tensor, kernel: torch.Tensor) -> ChannelRanking:
    """sigmoid(conv1d(GAP(f))) over the channel axis with zero same-padding."""
    data = f.data if isinstance(f, FeatureMap) else f
    kernel = torch.as_tensor(kernel, dtype=data.dtype).reshape(-1)
    k = kernel.numel()
    if k % 2 == 0:
        raise ValueError(f"attention kernel size must be odd, got {k}")
    gap = data.mean(dim=(-2, -1))
    logits = F.conv1d(gap[None, None], kernel[None, None], padding=k // 2)[0, 0]
    return ChannelRanking.from_weights(torch.sigmoid(logits))


class ChannelAttention(nn.Module):
    """Learned 1-D kernel for `channel_attention`."""

    def __init__(self, kernel_size: int = DEFAULT_ATTENTION_KERNEL):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"attention kernel size must be odd, got {kernel_size}")
        self.conv = nn.Conv1d(1, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, f: FeatureMap | torch.Tensor) -> ChannelRanking:
        return channel_attention(f, self.conv.weight.reshape(-1))


def sff_filter(
    f: FeatureMap | torch.Tensor,
    ranking: ChannelRanking,
    keep_fraction: float = DEFAULT_KEEP_FRACTION,
) -> FeatureMap | torch.Tensor:
    """Scale channels by their weights and keep the top K in rank order."""
    data = f.data if isinstance(f, FeatureMap) else f
    channels = int(data.shape[0])
    if ranking.weights.numel() != channels:
        raise ShapeMismatchError(
            f"Ranking covers {ranking.weights.numel()} channels, crop has {channels}"
        )
    keep = ranking.order[: top_k_count(channels, keep_fraction)]
    weighted = data * ranking.weights.to(data.dtype)[:, None, None]
    filtered = weighted[keep]
    if isinstance(f, FeatureMap):
        return FeatureMap(filtered, f.scale_tag)
    return filtered


def _stack(
    embeddings: Sequence[InstanceEmbedding] | Sequence[torch.Tensor] | torch.Tensor,
) -> torch.Tensor:
    if isinstance(embeddings, torch.Tensor):
        return embeddings if embeddings.dim() == 2 else embeddings[None]
    vectors = [e.z if isinstance(e, InstanceEmbedding) else torch.as_tensor(e) for e in embeddings]
    if not vectors:
        raise ValueError("empty embedding list")
    lengths = {int(v.numel()) for v in vectors}
    if len(lengths) > 1:
        raise ShapeMismatchError(f"Embeddings differ in length: {sorted(lengths)}")
    return torch.stack([v.reshape(-1) for v in vectors])


def agglomerative_cluster(
    embeddings: Sequence[InstanceEmbedding] | Sequence[torch.Tensor] | torch.Tensor,
    merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
) -> ClusterAssignment:
    """Complete-linkage cosine agglomeration; representatives are member means.

    Grouping runs on detached values; the means keep their autograd graph.
    """
    z = _stack(embeddings)
    if z.shape[0] == 0:
        raise ValueError("agglomerative_cluster needs at least one embedding")
    labels = agglomerate_by_threshold(z.detach().double().cpu().numpy(), merge_threshold)
    label_tensor = torch.tensor(labels, device=z.device)
    reps = torch.stack(
        [z[label_tensor == g].mean(dim=0) for g in range(max(labels) + 1)]
    )
    return ClusterAssignment(labels=labels, representatives=reps)


def instance_adv_loss(
    src_reps: torch.Tensor,
    tgt_reps: torch.Tensor,
    disc: nn.Module,
    lam: float = DEFAULT_GRL_LAMBDA,
) -> LossTerm:
    """Mean source-side plus mean target-side adversarial loss behind the GRL."""
    total = src_reps.new_zeros(())
    skipped = 0
    for reps, label in ((src_reps, DOMAIN_LABEL_SOURCE), (tgt_reps, DOMAIN_LABEL_TARGET)):
        if reps.shape[0] == 0:
            skipped += 1
            continue
        total = total + adv_loss(disc(grl(reps, lam)), label)
    return LossTerm(total, skipped)


def nearest_neighbor(
    z_s: torch.Tensor, tgt: Sequence[torch.Tensor] | torch.Tensor
) -> int:
    """Index of the Euclidean-nearest target; ties go to the lowest index."""
    targets = _stack(tgt)
    if targets.shape[0] == 0:
        raise ValueError("nearest_neighbor needs a non-empty target set")
    dist = ((targets - z_s.reshape(1, -1)) ** 2).sum(dim=1)
    return int(torch.argmin(dist))


def contrastive_loss(
    src: Sequence[torch.Tensor] | torch.Tensor,
    tgt: Sequence[torch.Tensor] | torch.Tensor,
    margin: float = DEFAULT_MARGIN,
) -> LossTerm:
    """Pull each source vector to its nearest target, push the rest past the margin.

    Uses squared Euclidean distances. Only the source -> target direction
    is summed.
    """
    if margin <= 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    if len(src) == 0 or len(tgt) == 0:
        return LossTerm(torch.zeros(()), skipped=1)
    zs = _stack(src)
    zt = _stack(tgt)
    if zs.shape[1] != zt.shape[1]:
        raise ShapeMismatchError(
            f"Embedding lengths differ: {zs.shape[1]} vs {zt.shape[1]}"
        )
    d2 = ((zs[:, None, :] - zt[None, :, :]) ** 2).sum(dim=-1)
    with torch.no_grad():
        nn_index = torch.argmin(d2, dim=1)
    rows = torch.arange(zs.shape[0], device=zs.device)
    pull = d2[rows, nn_index].sum()
    negatives = torch.ones_like(d2, dtype=torch.bool)
    negatives[rows, nn_index] = False
    push = torch.clamp(margin - d2, min=0.0)[negatives].sum()
    return LossTerm(pull + push)


def select_instances(
    raw_predictions: Sequence[torch.Tensor],
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_iou: float = DEFAULT_NMS_IOU,
    max_instances: int = DEFAULT_MAX_INSTANCES,
) -> DetectionSet:
    """Decoded detections of one image that seed instance alignment."""
    return decode(raw_predictions, conf_threshold, nms_iou, max_detections=max_instances)


@dataclass
class InstanceAlignment:
    loss: LossTerm
    instances: dict[str, int] = field(default_factory=dict)
    clusters: dict[str, int] = field(default_factory=dict)
    dropped: int = 0


class InstanceAligner(nn.Module):
    """Per-scale instance clustering with adversarial or contrastive alignment."""

    def __init__(
        self,
        channels: Sequence[int],
        mode: str = INSTANCE_MODE_ADVERSARIAL,
        *,
        sff: bool = False,
        pool_size: int = DEFAULT_POOL_SIZE,
        keep_fraction: float = DEFAULT_KEEP_FRACTION,
        merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
        margin: float = DEFAULT_MARGIN,
        attention_kernel: int = DEFAULT_ATTENTION_KERNEL,
        grl_lambda: float = DEFAULT_GRL_LAMBDA,
        contrastive_raw: bool = False,
    ):
        super().__init__()
        if mode not in INSTANCE_MODES:
            raise ValueError(f"Unknown instance alignment mode {mode!r}")
        self.mode = mode
        self.sff = sff
        self.pool_size = pool_size
        self.keep_fraction = keep_fraction
        self.merge_threshold = merge_threshold
        self.margin = margin
        self.grl_lambda = grl_lambda
        self.contrastive_raw = contrastive_raw
        self.attention = nn.ModuleList(
            [ChannelAttention(attention_kernel) for _ in channels] if sff else []
        )
        dims = [
            (top_k_count(c, keep_fraction) if sff else c) * pool_size**2 for c in channels
        ]
        self.discriminators = nn.ModuleList(
            [VectorDiscriminator(d) for d in dims]
            if mode == INSTANCE_MODE_ADVERSARIAL
            else []
        )
        self.scale_count = len(dims)

    def embed(
        self,
        features: Sequence[torch.Tensor],
        detections: Sequence[DetectionSet],
    ) -> tuple[list[list[torch.Tensor]], int]:
        """Embeddings grouped by scale for a batch, plus the dropped count."""
        per_scale: list[list[torch.Tensor]] = [[] for _ in range(self.scale_count)]
        dropped = 0
        for b, dets in enumerate(detections):
            if not dets:
                continue
            scale_set = ScaleSet.from_tensors([t[b] for t in features])
            crops = extract_instances(scale_set, dets, self.pool_size)
            dropped += crops.dropped
            for crop, s in zip(crops.crops, crops.scale_indices, strict=True):
                if self.sff:
                    crop = sff_filter(crop, self.attention[s](crop), self.keep_fraction)
                per_scale[s].append(flatten(crop))
        return per_scale, dropped

    def _scale_loss(
        self, s: int, src: list[torch.Tensor], tgt: list[torch.Tensor]
    ) -> tuple[torch.Tensor, int, int]:
        zs = torch.stack(src)
        zt = torch.stack(tgt)
        if self.mode == INSTANCE_MODE_CONTRASTIVE:
            zs = F.normalize(zs, dim=1)
            zt = F.normalize(zt, dim=1)
        src_groups = agglomerative_cluster(zs, self.merge_threshold)
        tgt_groups = agglomerative_cluster(zt, self.merge_threshold)
        if self.mode == INSTANCE_MODE_ADVERSARIAL:
            term = instance_adv_loss(
                src_groups.representatives,
                tgt_groups.representatives,
                self.discriminators[s],
                self.grl_lambda,
            )
        elif self.contrastive_raw:
            term = contrastive_loss(zs, zt, self.margin)
        else:
            term = contrastive_loss(
                src_groups.representatives, tgt_groups.representatives, self.margin
            )
        return term.value, src_groups.group_count, tgt_groups.group_count

    def forward(
        self,
        src_features: Sequence[torch.Tensor],
        src_detections: Sequence[DetectionSet],
        tgt_features: Sequence[torch.Tensor],
        tgt_detections: Sequence[DetectionSet],
    ) -> InstanceAlignment:
        src, src_dropped = self.embed(src_features, src_detections)
        tgt, tgt_dropped = self.embed(tgt_features, tgt_detections)
        counts = {
            DOMAIN_SOURCE: sum(len(z) for z in src),
            DOMAIN_TARGET: sum(len(z) for z in tgt),
        }
        result = InstanceAlignment(
            loss=LossTerm(src_features[0].new_zeros(())),
            instances=counts,
            clusters={DOMAIN_SOURCE: 0, DOMAIN_TARGET: 0},
            dropped=src_dropped + tgt_dropped,
        )
        if min(counts.values()) < MIN_INSTANCES_PER_DOMAIN:
            _LOGGER.debug(
                "Instance alignment skipped: %d source / %d target instances",
                counts[DOMAIN_SOURCE],
                counts[DOMAIN_TARGET],
            )
            result.loss.skipped = 1
            return result
        total = result.loss.value
        aligned_scales = 0
        try:
            for s in range(self.scale_count):
                if not src[s] or not tgt[s]:
                    continue
                value, n_src, n_tgt = self._scale_loss(s, src[s], tgt[s])
                total = total + value
                aligned_scales += 1
                result.clusters[DOMAIN_SOURCE] += n_src
                result.clusters[DOMAIN_TARGET] += n_tgt
        except DegenerateEmbeddingError:
            _LOGGER.warning("Instance alignment skipped: degenerate embeddings")
            result.loss = LossTerm(src_features[0].new_zeros(()), skipped=1)
            return result
        # Instances present but never on a shared scale
        result.loss = LossTerm(total, skipped=0 if aligned_scales else 1)
        return result
