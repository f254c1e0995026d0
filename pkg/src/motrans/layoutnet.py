"""Temporal layout prediction: raw per-frame decode fused with a warped history.

Three encoders share a bottleneck: source layout, a 3-frame pose stack, and the
two previous layouts. One decoder emits the raw layout, another a flow field
plus fusion weight; the final layout is
    fused = raw * w + warp(prev, flow) * (1 - w)
renormalized to a per-pixel simplex.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import config as C
from .blocks import ConvDecoder, ConvEncoder
from .geometry import backward_warp
from .losses import gan_g_loss


@dataclass
class LayoutResult:
    raw: torch.Tensor       # (B, 6, H, W) simplex
    flow: torch.Tensor      # (B, 2, H, W)
    weight: torch.Tensor    # (B, 1, H, W) in (0, 1)
    fused: torch.Tensor     # (B, 6, H, W) simplex


class LayoutGenerator(nn.Module):
    def __init__(self, base_width: int = 32, n_down: int = 2, n_res: int = 2,
                 pose_channels: int = 3, history: int = 2):
        super().__init__()
        self.history = history
        parts = C.NUM_PARTS
        self.enc_source = ConvEncoder(parts, base_width, n_down)
        self.enc_pose = ConvEncoder(pose_channels * (history + 1), base_width, n_down)
        self.enc_history = ConvEncoder(parts * history, base_width, n_down)
        feat = self.enc_source.out_channels
        self.dec_layout = ConvDecoder(feat, parts, n_down, n_res, activation="softmax")
        self.dec_flow = ConvDecoder(feat, 3, n_down, n_res, activation="linear")

    def forward(self, source_layout: torch.Tensor, pose_stack: torch.Tensor,
                prev_layouts: torch.Tensor) -> LayoutResult:
        """prev_layouts stacks (t-2, t-1) on channels; the t-1 half feeds the warp."""
        f_src = self.enc_source(source_layout)
        f_pose = self.enc_pose(pose_stack)
        f_hist = self.enc_history(prev_layouts)
        raw = self.dec_layout(f_src + f_pose + f_hist)
        fw = self.dec_flow(f_pose + f_hist)
        flow = fw[:, :2]
        weight = torch.sigmoid(fw[:, 2:3])
        prev_last = prev_layouts[:, C.NUM_PARTS:]
        warped = backward_warp(prev_last, flow)
        fused = raw * weight + warped * (1.0 - weight)
        fused = fused.clamp_min(0.0)
        fused = fused / fused.sum(dim=1, keepdim=True).clamp_min(1e-8)
        return LayoutResult(raw=raw, flow=flow, weight=weight, fused=fused)


def bootstrap_history(source_layout: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """History stand-in before any frame exists: two copies of the source layout."""
    return source_layout, source_layout


def stack_history(prev2: torch.Tensor, prev1: torch.Tensor) -> torch.Tensor:
    return torch.cat([prev2, prev1], dim=1)


def layout_cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel cross-entropy against a one-hot layout; 0 when pred equals target."""
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    return -(target * (pred + 1e-8).log()).sum(dim=1).mean()


def flow_l1(flow: torch.Tensor, target: torch.Tensor,
            weight: torch.Tensor) -> torch.Tensor:
    """Confidence-weighted endpoint L1; weight is (B, 1, H, W) in [0, 1]."""
    err = (flow - target).abs().mean(dim=1, keepdim=True)
    den = weight.sum().clamp_min(1e-8)
    return (err * weight).sum() / den


def layout_generator_loss(result: LayoutResult, target: torch.Tensor,
                          flow_target: torch.Tensor, flow_weight: torch.Tensor,
                          disc=None, condition: torch.Tensor | None = None,
                          lambda_rec: float = 10.0,
                          lambda_flow: float = 10.0) -> dict[str, torch.Tensor]:
    terms = {
        "ce_fused": layout_cross_entropy(result.fused, target),
        "ce_raw": layout_cross_entropy(result.raw, target),
        "flow": flow_l1(result.flow, flow_target, flow_weight),
    }
    total = lambda_rec * (terms["ce_fused"] + terms["ce_raw"]) + lambda_flow * terms["flow"]
    if disc is not None:
        terms["adv"] = gan_g_loss(disc, result.fused, condition)
        total = total + terms["adv"]
    terms["total"] = total
    return terms
