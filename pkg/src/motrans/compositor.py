"""Whole-frame composition: refine the summed regions into a coherent frame.

The compositor encodes the aligned source foreground, the foreground history
plus the coarse region sum, and a layout/pose conditioning stack. Source and
history features are fused by cosine-affinity texture alignment, decoded into
a refined foreground plus a soft background mask, and composited as
    out = mask * background + foreground.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import config as C
from .blocks import ConvDecoder, ConvEncoder
from .geometry import Layout, backward_warp
from .losses import gan_g_loss, l1_loss, perceptual_loss


def texture_align(source_feat: torch.Tensor, target_feat: torch.Tensor,
                  eps: float = 1e-8,
                  return_affinity: bool = False):
    """Fuse two (B, C, H, W) feature maps by soft cosine correspondence.

    Affinity column j is a softmax over source positions of the cosine between
    source column i and target column j, so each fused column is a convex
    combination of source columns added to the target column. Positive rescaling
    of either input leaves the affinity unchanged; with a single spatial
    position the result is exactly source + target.
    """
    if source_feat.shape != target_feat.shape:
        raise ValueError("feature shapes differ")
    if source_feat.dim() != 4:
        raise ValueError("expected (B, C, H, W)")
    b, c, h, w = source_feat.shape
    src = source_feat.reshape(b, c, h * w)
    tgt = target_feat.reshape(b, c, h * w)
    src_n = src / src.norm(dim=1, keepdim=True).clamp_min(eps)
    tgt_n = tgt / tgt.norm(dim=1, keepdim=True).clamp_min(eps)
    cos = src_n.transpose(1, 2) @ tgt_n          # (B, hw_src, hw_tgt)
    affinity = torch.softmax(cos, dim=1)
    fused = (src @ affinity + tgt).reshape(b, c, h, w)
    if return_affinity:
        return fused, affinity
    return fused


@dataclass
class CompositorResult:
    foreground_raw: torch.Tensor          # (B, 3, H, W) before temporal fusion
    foreground: torch.Tensor              # (B, 3, H, W)
    soft_mask: torch.Tensor               # (B, 1, H, W) in (0, 1)
    composite: torch.Tensor               # (B, 3, H, W), exactly mask*bg + foreground
    flow: torch.Tensor | None = None      # (B, 2, H, W)
    flow_weight: torch.Tensor | None = None


class FrameCompositor(nn.Module):
    def __init__(self, base_width: int = 32, n_down: int = 2, n_res: int = 2,
                 pose_channels: int = 3, history: int = 2,
                 use_texture_align: bool = True, use_flow_fusion: bool = True):
        super().__init__()
        self.use_texture_align = use_texture_align
        self.use_flow_fusion = use_flow_fusion
        cond_ch = (history + 1) * (C.NUM_PARTS + pose_channels)
        self.enc_source = ConvEncoder(3, base_width, n_down)
        self.enc_history = ConvEncoder(3 * (history + 1), base_width, n_down)
        self.enc_condition = ConvEncoder(cond_ch, base_width, n_down)
        feat = self.enc_source.out_channels
        self.dec_foreground = ConvDecoder(feat, 3, n_down, n_res, activation="tanh")
        self.dec_mask = ConvDecoder(feat, 1, n_down, n_res, activation="sigmoid")
        self.dec_flow = ConvDecoder(feat, 3, n_down, n_res, activation="linear") \
            if use_flow_fusion else None

    def forward(self, aligned_source_fg: torch.Tensor, fg_history: torch.Tensor,
                coarse_fg: torch.Tensor, condition: torch.Tensor,
                background: torch.Tensor,
                fusion_prev: torch.Tensor | None = None) -> CompositorResult:
        """fg_history stacks (t-2, t-1); fusion_prev is the frame warped for temporal fusion."""
        f_src = self.enc_source(aligned_source_fg)
        f_hist = self.enc_history(torch.cat([fg_history, coarse_fg], dim=1))
        f_cond = self.enc_condition(condition)
        if self.use_texture_align:
            fused_feat = texture_align(f_src, f_hist)
        else:
            fused_feat = f_src + f_hist
        fg_raw = self.dec_foreground(f_cond + fused_feat)
        soft_mask = self.dec_mask(f_hist + f_cond)
        flow = flow_weight = None
        fg = fg_raw
        if self.dec_flow is not None:
            if fusion_prev is None:
                raise ValueError("flow fusion enabled but fusion_prev missing")
            fw = self.dec_flow(f_hist + f_cond)
            flow = fw[:, :2]
            flow_weight = torch.sigmoid(fw[:, 2:3])
            fg = fg_raw * flow_weight + backward_warp(fusion_prev, flow) * (1.0 - flow_weight)
        composite = soft_mask * background + fg
        return CompositorResult(foreground_raw=fg_raw, foreground=fg, soft_mask=soft_mask,
                                composite=composite, flow=flow, flow_weight=flow_weight)


def face_crop(frame: torch.Tensor, layout: Layout | torch.Tensor, size: int = 32,
              pad: float = 0.1, min_area: int = 16) -> tuple[torch.Tensor, bool]:
    """Resized crop of the head-class bbox, or (zeros, False) when the head is too small."""
    ch = layout.channels if isinstance(layout, Layout) else layout
    if frame.dim() != 3 or ch.dim() != 3:
        raise ValueError("expected unbatched (C, H, W) inputs")
    head = ch[0] if ch.shape[0] == C.NUM_PARTS else ch
    hard = head > 0.5
    empty = frame.new_zeros((frame.shape[0], size, size))
    n = int(hard.sum())
    if n < min_area:
        return empty, False
    ys, xs = torch.nonzero(hard, as_tuple=True)
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    py = pad * (y1 - y0 + 1)
    px = pad * (x1 - x0 + 1)
    h, w = frame.shape[1:]
    y0 = max(0, int(torch.floor(torch.tensor(y0 - py))))
    y1 = min(h - 1, int(torch.ceil(torch.tensor(y1 + py))))
    x0 = max(0, int(torch.floor(torch.tensor(x0 - px))))
    x1 = min(w - 1, int(torch.ceil(torch.tensor(x1 + px))))
    crop = frame[:, y0:y1 + 1, x0:x1 + 1].unsqueeze(0)
    out = F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False)
    return out[0], True


def compositor_generator_loss(result: CompositorResult, target_frame: torch.Tensor,
                              target_fg: torch.Tensor, disc, extractor,
                              condition: torch.Tensor,
                              face_disc=None,
                              face_fake: torch.Tensor | None = None,
                              flow_target: torch.Tensor | None = None,
                              flow_target_weight: torch.Tensor | None = None,
                              lambda_rec: float = 10.0, lambda_per: float = 10.0,
                              lambda_flow: float = 10.0) -> dict[str, torch.Tensor]:
    from .layoutnet import flow_l1  # local import avoids a cycle

    terms = {
        "rec": l1_loss(result.composite, target_frame),
        "rec_fg": l1_loss(result.foreground, target_fg),
        "per": perceptual_loss(extractor, result.composite, target_frame),
        "adv": gan_g_loss(disc, result.composite, condition),
    }
    total = lambda_rec * (terms["rec"] + terms["rec_fg"]) \
        + lambda_per * terms["per"] + terms["adv"]
    if face_disc is not None and face_fake is not None:
        terms["adv_face"] = gan_g_loss(face_disc, face_fake)
        total = total + terms["adv_face"]
    if result.flow is not None and flow_target is not None:
        terms["flow"] = flow_l1(result.flow, flow_target, flow_target_weight)
        total = total + lambda_flow * terms["flow"]
    terms["total"] = total
    return terms
