"""Per-region texture generation with one generator shared across all five regions.

Each call renders one body-part image from its target mask, the two previous
region images, and the globally aligned source region; the output is masked to
the region support, so summing the five regions composes the foreground.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .blocks import ConvDecoder, ConvEncoder
from .losses import gan_g_loss, l1_loss, perceptual_loss


class RegionGenerator(nn.Module):
    def __init__(self, base_width: int = 32, n_down: int = 2, n_res: int = 2):
        super().__init__()
        self.enc_mask = ConvEncoder(1, base_width, n_down)
        self.enc_appearance = ConvEncoder(9, base_width, n_down)
        self.dec = ConvDecoder(self.enc_mask.out_channels, 3, n_down, n_res,
                               activation="tanh")

    def forward(self, mask: torch.Tensor, prev1: torch.Tensor, prev2: torch.Tensor,
                aligned_source: torch.Tensor) -> torch.Tensor:
        """mask is the hard (B, 1, H, W) target region; prev1 is the most recent frame."""
        appearance = torch.cat([prev1, prev2, aligned_source], dim=1)
        out = self.dec(self.enc_mask(mask) + self.enc_appearance(appearance))
        return out * mask


def region_bootstrap(aligned_source: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Region history stand-in before any frame exists."""
    return aligned_source, aligned_source


def region_generator_loss(fake: torch.Tensor, real: torch.Tensor, mask: torch.Tensor,
                          disc, extractor, lambda_rec: float = 10.0,
                          lambda_per: float = 10.0) -> dict[str, torch.Tensor]:
    terms = {
        "rec": l1_loss(fake, real),
        "per": perceptual_loss(extractor, fake, real),
        "adv": gan_g_loss(disc, fake, mask),
    }
    terms["total"] = lambda_rec * terms["rec"] + lambda_per * terms["per"] + terms["adv"]
    return terms
