"""Adversarial global alignment: gradient reversal, discriminators and domain losses."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .const import DEFAULT_GRL_LAMBDA, LOG_CLAMP_EPS
from .core import FeatureMap
from .exceptions import ShapeMismatchError

DOMAIN_LABEL_SOURCE = 0
DOMAIN_LABEL_TARGET = 1


class GradReverse(torch.autograd.Function):
    """Identity forward; gradient multiplied by -lambda on the way back."""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grl(f: FeatureMap | torch.Tensor, lam: float = DEFAULT_GRL_LAMBDA):
    if not math.isfinite(lam):
        raise ValueError(f"GRL lambda must be finite, got {lam}")
    if isinstance(f, FeatureMap):
        return FeatureMap(GradReverse.apply(f.data, lam), f.scale_tag)
    return GradReverse.apply(f, lam)


class Discriminator(nn.Module):
    """Two stride-2 convolutions, global average pool, linear to one logit."""

    def __init__(self, in_channels: int, hidden: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.classifier = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[None]
        return self.classifier(self.features(x)).squeeze(-1)


class VectorDiscriminator(nn.Module):
    """Domain classifier for flat instance representatives."""

    def __init__(self, in_features: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            x = x[None]
        return self.net(x).squeeze(-1)


def adv_loss(logit: torch.Tensor | float, d: int) -> torch.Tensor:
    """Binary cross-entropy of sigmoid(logit) against domain label d.

    Log arguments are clamped at 1e-7. Batched logits are averaged.
    """
    if d not in (DOMAIN_LABEL_SOURCE, DOMAIN_LABEL_TARGET):
        raise ValueError(f"Domain label must be 0 or 1, got {d}")
    if not isinstance(logit, torch.Tensor):
        logit = torch.tensor(float(logit))
    floor = math.log(LOG_CLAMP_EPS)
    log_p = F.logsigmoid(logit).clamp(min=floor)
    log_not_p = F.logsigmoid(-logit).clamp(min=floor)
    loss = -(d * log_p + (1 - d) * log_not_p)
    return loss.mean()


def img_loss(
    fs: FeatureMap | torch.Tensor,
    ft: FeatureMap | torch.Tensor,
    disc: nn.Module,
    lam: float = DEFAULT_GRL_LAMBDA,
) -> torch.Tensor:
    """L_img = L_adv(source, d=0) + L_adv(target, d=1), both behind the GRL."""
    xs = fs.data if isinstance(fs, FeatureMap) else fs
    xt = ft.data if isinstance(ft, FeatureMap) else ft
    if xs.shape[-3:] != xt.shape[-3:]:
        raise ShapeMismatchError(
            f"Global feature shapes differ: {tuple(xs.shape)} vs {tuple(xt.shape)}"
        )
    return adv_loss(disc(grl(xs, lam)), DOMAIN_LABEL_SOURCE) + adv_loss(
        disc(grl(xt, lam)), DOMAIN_LABEL_TARGET
    )
