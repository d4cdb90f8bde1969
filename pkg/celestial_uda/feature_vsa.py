"""Channel-wise feature clustering alignment.

Each scale's neck map is collapsed into a few single-channel maps, either group
means of clustered channels (hierarchical C+1 or K-Means K=2) or a
pixel-wise top-K attention pool, and those maps are fed to one adversarial
discriminator per scale.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .clustering import agglomerate_to_count, kmeans
from .const import (
    DEFAULT_ATTENTION_KERNEL,
    DEFAULT_GRL_LAMBDA,
    DEFAULT_KEEP_FRACTION,
    DEFAULT_KMEANS_MAX_ITER,
    DEFAULT_SEED,
    DOMAIN_SOURCE,
    DOMAIN_TARGET,
)
from .core import FeatureMap, LossTerm, top_k_count
from .exceptions import DegenerateEmbeddingError, ShapeMismatchError
from .global_align import (
    DOMAIN_LABEL_SOURCE,
    DOMAIN_LABEL_TARGET,
    Discriminator,
    adv_loss,
    grl,
)
from .instance_vsa import ChannelAttention, ChannelRanking

_LOGGER = logging.getLogger(__name__)

FEATURE_MODE_HIERARCHICAL = "hierarchical"
FEATURE_MODE_KMEANS = "kmeans"
FEATURE_MODE_PTAP = "ptap"
FEATURE_MODES = (FEATURE_MODE_HIERARCHICAL, FEATURE_MODE_KMEANS, FEATURE_MODE_PTAP)

KMEANS_GROUPS = 2
FEATURE_DISC_HIDDEN = 32


@dataclass
class ChannelGrouping:
    labels: list[int]
    group_means: torch.Tensor  # (G, H, W)
    inertia_history: list[float] = field(default_factory=list)

    @property
    def group_count(self) -> int:
        return int(self.group_means.shape[0])


def _group_means(data: torch.Tensor, labels: Sequence[int], groups: int) -> torch.Tensor:
    label_tensor = torch.tensor(list(labels), device=data.device)
    means = []
    for g in range(groups):
        members = data[label_tensor == g]
        # Duplicate K-Means seeds leave a group empty
        means.append(members.mean(dim=0) if len(members) else data.new_zeros(data.shape[1:]))
    return torch.stack(means)


def _channel_rows(data: torch.Tensor) -> np.ndarray:
    return data.detach().reshape(data.shape[0], -1).double().cpu().numpy()


def channel_cluster_hierarchical(f: FeatureMap | torch.Tensor, groups: int) -> ChannelGrouping:
    """Complete-linkage cosine agglomeration of channels down to `groups` clusters."""
    data = f.data if isinstance(f, FeatureMap) else f
    channels = int(data.shape[0])
    if channels < groups:
        raise ValueError(f"Cannot split {channels} channels into {groups} groups")
    labels = agglomerate_to_count(_channel_rows(data), groups)
    return ChannelGrouping(labels=labels, group_means=_group_means(data, labels, groups))


def channel_cluster_kmeans(
    f: FeatureMap | torch.Tensor,
    k: int = KMEANS_GROUPS,
    max_iter: int = DEFAULT_KMEANS_MAX_ITER,
    seed: int = DEFAULT_SEED,
) -> ChannelGrouping:
    """Lloyd K-Means over flattened channels with Euclidean distance."""
    data = f.data if isinstance(f, FeatureMap) else f
    if int(data.shape[0]) < k:
        raise ValueError(f"Cannot split {data.shape[0]} channels into {k} groups")
    result = kmeans(_channel_rows(data), k, max_iter=max_iter, seed=seed)
    return ChannelGrouping(
        labels=result.labels,
        group_means=_group_means(data, result.labels, k),
        inertia_history=result.inertia_history,
    )


def ptap_pool(
    f: FeatureMap | torch.Tensor,
    ranking: ChannelRanking,
    keep_fraction: float = DEFAULT_KEEP_FRACTION,
) -> FeatureMap:
    """Per pixel, mean of the K largest attention-weighted channel values."""
    data = f.data if isinstance(f, FeatureMap) else f
    channels = int(data.shape[0])
    if ranking.weights.numel() != channels:
        raise ShapeMismatchError(
            f"Ranking covers {ranking.weights.numel()} channels, map has {channels}"
        )
    k = top_k_count(channels, keep_fraction)
    weighted = data * ranking.weights.to(data.dtype)[:, None, None]
    top, _ = torch.sort(weighted, dim=0, descending=True, stable=True)
    pooled = top[:k].mean(dim=0, keepdim=True)
    return FeatureMap(pooled, f.scale_tag if isinstance(f, FeatureMap) else None)


def feature_adv_loss(
    src_maps: Sequence[torch.Tensor],
    tgt_maps: Sequence[torch.Tensor],
    discs: Sequence[nn.Module],
    lam: float = DEFAULT_GRL_LAMBDA,
) -> LossTerm:
    """Sum over scales of mean source and mean target adversarial losses.

    Each entry of `src_maps` / `tgt_maps` stacks one scale's pooled maps as
    (N, H, W). An empty side contributes nothing and counts as skipped.
    """
    if not (len(src_maps) == len(tgt_maps) == len(discs)):
        raise ShapeMismatchError("src_maps, tgt_maps and discs must align per scale")
    total: torch.Tensor | None = None
    skipped = 0
    for src, tgt, disc in zip(src_maps, tgt_maps, discs, strict=True):
        if len(src) and len(tgt) and src.shape[-2:] != tgt.shape[-2:]:
            raise ShapeMismatchError(
                f"Map shapes differ: {tuple(src.shape[-2:])} vs {tuple(tgt.shape[-2:])}"
            )
        for maps, label in ((src, DOMAIN_LABEL_SOURCE), (tgt, DOMAIN_LABEL_TARGET)):
            if len(maps) == 0:
                skipped += 1
                continue
            term = adv_loss(disc(grl(maps[:, None], lam)), label)
            total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return LossTerm(total, skipped)


@dataclass
class FeatureAlignment:
    loss: LossTerm
    groups: dict[str, list[int]] = field(default_factory=dict)


class FeatureAligner(nn.Module):
    """Per-scale channel grouping or PTAP pooling with one discriminator per scale."""

    def __init__(
        self,
        channels: Sequence[int],
        mode: str,
        *,
        class_count: int = 1,
        keep_fraction: float = DEFAULT_KEEP_FRACTION,
        attention_kernel: int = DEFAULT_ATTENTION_KERNEL,
        kmeans_max_iter: int = DEFAULT_KMEANS_MAX_ITER,
        seed: int = DEFAULT_SEED,
        grl_lambda: float = DEFAULT_GRL_LAMBDA,
    ):
        super().__init__()
        if mode not in FEATURE_MODES:
            raise ValueError(f"Unknown feature alignment mode {mode!r}")
        self.mode = mode
        self.groups = class_count + 1
        self.keep_fraction = keep_fraction
        self.kmeans_max_iter = kmeans_max_iter
        self.seed = seed
        self.grl_lambda = grl_lambda
        if mode == FEATURE_MODE_HIERARCHICAL and min(channels) < self.groups:
            raise ValueError(
                f"{self.groups} channel groups need at least that many channels per scale"
            )
        self.attention = nn.ModuleList(
            [ChannelAttention(attention_kernel) for _ in channels]
            if mode == FEATURE_MODE_PTAP
            else []
        )
        self.discriminators = nn.ModuleList(
            [Discriminator(1, hidden=FEATURE_DISC_HIDDEN) for _ in channels]
        )

    def pool(self, f: torch.Tensor, scale_index: int) -> torch.Tensor:
        """Collapse one (C, H, W) map into (G, H, W) pooled maps."""
        if self.mode == FEATURE_MODE_HIERARCHICAL:
            return channel_cluster_hierarchical(f, self.groups).group_means
        if self.mode == FEATURE_MODE_KMEANS:
            return channel_cluster_kmeans(
                f, KMEANS_GROUPS, self.kmeans_max_iter, self.seed
            ).group_means
        ranking = self.attention[scale_index](f)
        return ptap_pool(f, ranking, self.keep_fraction).data

    def _domain_maps(self, features: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return [
            torch.cat([self.pool(batch[b], s) for b in range(batch.shape[0])])
            for s, batch in enumerate(features)
        ]

    def forward(
        self,
        src_features: Sequence[torch.Tensor],
        tgt_features: Sequence[torch.Tensor],
    ) -> FeatureAlignment:
        try:
            src_maps = self._domain_maps(src_features)
            tgt_maps = self._domain_maps(tgt_features)
        except DegenerateEmbeddingError:
            _LOGGER.warning("Feature alignment skipped: degenerate channel maps")
            zero = src_features[0].new_zeros(())
            return FeatureAlignment(loss=LossTerm(zero, skipped=2 * len(src_features)))
        loss = feature_adv_loss(src_maps, tgt_maps, self.discriminators, self.grl_lambda)
        if loss.skipped:
            _LOGGER.debug("Feature alignment skipped %d empty domain sides", loss.skipped)
        groups = {
            DOMAIN_SOURCE: [int(m.shape[0]) for m in src_maps],
            DOMAIN_TARGET: [int(m.shape[0]) for m in tgt_maps],
        }
        return FeatureAlignment(loss=loss, groups=groups)
