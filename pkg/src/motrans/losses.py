"""Reconstruction, perceptual, and adversarial losses.

The perceptual extractor is a small frozen randomly-initialized conv stack; its
taps stand in for pretrained features, which keeps the loss self-contained and
exactly reproducible from a seed.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """Channel covariance normalized by c*h*w; accepts (C, H, W) or (B, C, H, W)."""
    if features.dim() == 3:
        return gram_matrix(features.unsqueeze(0))[0]
    if features.dim() != 4:
        raise ValueError("features must be (C, H, W) or (B, C, H, W)")
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


class PerceptualExtractor(nn.Module):
    """Frozen 3-tap conv feature stack on [-1, 1] images."""

    def __init__(self, seed: int = 1234, in_channels: int = 3,
                 widths: tuple[int, ...] = (8, 16, 32)):
        super().__init__()
        convs = []
        prev = in_channels
        for i, w in enumerate(widths):
            convs.append(nn.Conv2d(prev, w, 3, 1 if i == 0 else 2, 1))
            prev = w
        self.convs = nn.ModuleList(convs)
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                conv.weight.copy_(torch.empty_like(conv.weight).normal_(0.0, std, generator=gen))
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4:
            raise ValueError("expected (B, C, H, W)")
        taps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            taps.append(x)
        return taps


def perceptual_loss(extractor: PerceptualExtractor, x: torch.Tensor,
                    y: torch.Tensor) -> torch.Tensor:
    """Content (feature L1) plus style (Gram L1) summed over taps."""
    if x.shape != y.shape:
        raise ValueError("inputs must share a shape")
    total = x.new_zeros(())
    for fx, fy in zip(extractor(x), extractor(y)):
        total = total + l1_loss(fx, fy) + l1_loss(gram_matrix(fx), gram_matrix(fy))
    return total


def _scores(disc, image, condition):
    return [score for score, _ in disc(image, condition)]


def gan_g_loss(disc, fake: torch.Tensor,
               condition: torch.Tensor | None = None) -> torch.Tensor:
    """Non-saturating generator loss summed over discriminator scales."""
    total = fake.new_zeros(())
    for score in _scores(disc, fake, condition):
        total = total + F.softplus(-score).mean()
    return total


def gan_d_loss(disc, real: torch.Tensor, fake: torch.Tensor,
               condition: torch.Tensor | None = None) -> torch.Tensor:
    """Minimized negation of E[log D(real)] + E[log(1 - D(fake))]; 2*log 2 per scale at D=1/2."""
    fake = fake.detach()
    total = real.new_zeros(())
    real_scores = _scores(disc, real, condition)
    fake_scores = _scores(disc, fake, condition)
    for sr, sf in zip(real_scores, fake_scores):
        total = total + F.softplus(-sr).mean() + F.softplus(sf).mean()
    return total
