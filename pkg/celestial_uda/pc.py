"""Perceptual Consistency: scale-weighted L1 between source and target neck features.

Scale i = 1..3 runs finest -> coarsest (large, medium, small spatial map)
with weight w_i = 2^(3 - i), so the coarsest map is divided by 1 and
contributes most.
"""

from __future__ import annotations

from collections.abc import Sequence

import torch

from .core import ScaleSet
from .exceptions import ShapeMismatchError


def pc_weights(scale_count: int = 3) -> tuple[float, ...]:
    return tuple(float(2 ** (scale_count - i)) for i in range(1, scale_count + 1))


def _tensors(scales: ScaleSet | Sequence[torch.Tensor]) -> tuple[torch.Tensor, ...]:
    if isinstance(scales, ScaleSet):
        return scales.tensors()
    return tuple(scales)


def pc_loss(
    fs: ScaleSet | Sequence[torch.Tensor],
    ft: ScaleSet | Sequence[torch.Tensor],
    normalize: bool = False,
) -> torch.Tensor:
    """Sum over scales of (1 / w_i) * ||F_S,i - F_T,i||_1.

    With `normalize` the per-scale L1 is a per-element mean instead of a sum.
    Batched (B, C, H, W) inputs give the mean of the per-image losses.
    """
    src = _tensors(fs)
    tgt = _tensors(ft)
    if len(src) != len(tgt):
        raise ShapeMismatchError(f"Scale counts differ: {len(src)} vs {len(tgt)}")
    weights = pc_weights(len(src))
    total = src[0].new_zeros(())
    for i, (a, b, w) in enumerate(zip(src, tgt, weights, strict=True)):
        if a.shape != b.shape:
            raise ShapeMismatchError(
                f"Scale {i} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
        diff = (a - b).abs()
        if normalize:
            term = diff.mean()
        else:
            term = diff.sum() / a.shape[0] if a.dim() == 4 else diff.sum()
        total = total + term / w
    return total
