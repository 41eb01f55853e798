"""Multi-period discriminator and the adversarial / feature-matching losses."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import LEAKY_SLOPE


class PeriodDiscriminator(nn.Module):
    """Folds the waveform into ``[frames, period]`` and applies 2-D convs along time."""

    def __init__(self, period: int, channels: Sequence[int] = (16, 32, 64), kernel: int = 5, stride: int = 3):
        super().__init__()
        self.period = period
        convs = []
        c_in = 1
        for c in channels:
            convs.append(nn.Conv2d(c_in, c, (kernel, 1), (stride, 1), padding=(kernel // 2, 0)))
            c_in = c
        convs.append(nn.Conv2d(c_in, c_in, (kernel, 1), 1, padding=(kernel // 2, 0)))
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(c_in, 1, (3, 1), 1, padding=(1, 0))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        B, T = x.shape
        if T % self.period:
            x = F.pad(x, (0, self.period - T % self.period))
        h = x.view(B, 1, -1, self.period)
        feats = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
            feats.append(h)
        score = self.post(h)
        feats.append(score)
        return score.flatten(1), feats


class DiscriminatorBank(nn.Module):
    def __init__(self, periods: Sequence[int] = (2, 3), channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.periods = list(periods)
        self.discs = nn.ModuleList(PeriodDiscriminator(p, channels) for p in periods)

    def forward(self, w: torch.Tensor):
        """Scores (one map per period) and per-period lists of feature maps."""
        if w.shape[-1] < 1:
            raise ValueError("empty waveform")
        if w.dim() == 1:
            w = w.unsqueeze(0)
        scores, features = [], []
        for d in self.discs:
            s, f = d(w)
            scores.append(s)
            features.append(f)
        return scores, features


TOY_PERIODS = (2, 3)
PAPER_PERIODS = (2, 3, 5, 7, 11)


def disc_forward(d: DiscriminatorBank, w: torch.Tensor):
    return d(w)


def gan_losses(real_scores: Sequence[torch.Tensor], fake_scores: Sequence[torch.Tensor]):
    """Least-squares GAN: ``(L_G, L_D)`` averaged over sub-discriminators.

    ``L_D = mean((real - 1)^2) + mean(fake^2)``; ``L_G = mean((fake - 1)^2)``.
    The caller decides which side receives gradients (detach ``fake`` for D).
    """
    if isinstance(real_scores, torch.Tensor):
        real_scores, fake_scores = [real_scores], [fake_scores]
    if len(real_scores) != len(fake_scores) or not real_scores:
        raise ValueError("real/fake score lists differ in length")
    loss_g = 0.0
    loss_d = 0.0
    for r, f in zip(real_scores, fake_scores):
        loss_d = loss_d + ((r - 1) ** 2).mean() + (f ** 2).mean()
        loss_g = loss_g + ((f - 1) ** 2).mean()
    n = len(real_scores)
    return loss_g / n, loss_d / n


def feature_matching_loss(real_features, fake_features) -> torch.Tensor:
    """Mean |real - fake| per feature map, averaged over layers and sub-discriminators.

    Real features are treated as constants.
    """
    if len(real_features) != len(fake_features):
        raise ValueError("feature structure mismatch")
    per_disc = []
    for rf, ff in zip(real_features, fake_features):
        if len(rf) != len(ff):
            raise ValueError("feature structure mismatch")
        per_disc.append(sum((r.detach() - f).abs().mean() for r, f in zip(rf, ff)) / len(rf))
    return sum(per_disc) / len(per_disc)
