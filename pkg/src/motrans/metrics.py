"""Image and video quality metrics.

All metrics consume images in [0, 1]; `to_unit_range` converts the pipeline's
[-1, 1] tensors. SSIM follows the standard 11x11 Gaussian (sigma 1.5) windowed
form with valid-window averaging; the distribution metric is a Frechet distance
over pooled taps of the frozen perceptual extractor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .geometry import FlowField, warp
from .losses import PerceptualExtractor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def to_unit_range(x: torch.Tensor) -> torch.Tensor:
    """Map [-1, 1] image data into [0, 1] with clamping."""
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    half = (size - 1) / 2.0
    coords = torch.arange(size, dtype=torch.float64) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM over channels and valid window positions of two (C, H, W) images."""
    if a.shape != b.shape or a.dim() != 3:
        raise ValueError("expected matching (C, H, W) images")
    c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    x = a.unsqueeze(1).double()
    y = b.unsqueeze(1).double()
    k = gaussian_window().reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    mu_x = F.conv2d(x, k)
    mu_y = F.conv2d(y, k)
    xx = F.conv2d(x * x, k) - mu_x * mu_x
    yy = F.conv2d(y * y, k) - mu_y * mu_y
    xy = F.conv2d(x * y, k) - mu_x * mu_y
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB against peak 1.0; +inf for identical inputs."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def masked_metric(metric, a: torch.Tensor, b: torch.Tensor,
                  mask: torch.Tensor):
    """Apply an image metric after masking both inputs (mask broadcast over channels)."""
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    return metric(a * mask, b * mask)


def temporal_consistency(frames: torch.Tensor, flows: list[FlowField]) -> float:
    """1 / (1 + mean weighted warp error); 1.0 for a perfectly static video."""
    if frames.dim() != 4:
        raise ValueError("frames must be (N, C, H, W)")
    n = frames.shape[0]
    if len(flows) != n - 1:
        raise ValueError(f"need {n - 1} flow fields, got {len(flows)}")
    errs = []
    for t in range(n - 1):
        fl = flows[t]
        warped = warp(frames[t + 1], fl)
        err = (warped - frames[t]).abs().mean(dim=0)
        weight = fl.weight if fl.weight is not None else torch.ones_like(err)
        den = float(weight.sum())
        if den > 0:
            errs.append(float((err * weight).sum()) / den)
    if not errs:
        return 1.0
    return 1.0 / (1.0 + float(np.mean(errs)))


def lpips_proxy(a: torch.Tensor, b: torch.Tensor,
                extractor: PerceptualExtractor) -> float:
    """Mean squared tap difference of the frozen extractor (inputs in [0, 1])."""
    if a.shape != b.shape or a.dim() != 3:
        raise ValueError("expected matching (C, H, W) images")
    xa = (a * 2.0 - 1.0).unsqueeze(0)
    xb = (b * 2.0 - 1.0).unsqueeze(0)
    vals = [float(((fa - fb) ** 2).mean()) for fa, fb in zip(extractor(xa), extractor(xb))]
    return float(np.mean(vals))


def _pooled_features(images: torch.Tensor, extractor: PerceptualExtractor) -> np.ndarray:
    x = images * 2.0 - 1.0
    taps = extractor(x)
    pooled = [t.mean(dim=(2, 3)) for t in taps]
    return torch.cat(pooled, dim=1).detach().cpu().double().numpy()


def frechet_distance(mu1: np.ndarray, sigma1: np.ndarray,
                     mu2: np.ndarray, sigma2: np.ndarray) -> float:
    """Frechet distance between two Gaussians; clamped to be non-negative."""
    diff = mu1 - mu2
    prod = sigma1 @ sigma2
    covmean, _ = scipy.linalg.sqrtm(prod, disp=False)
    if not np.isfinite(covmean).all():
        eps = 1e-9 * np.eye(sigma1.shape[0])
        covmean, _ = scipy.linalg.sqrtm((sigma1 + eps) @ (sigma2 + eps), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    val = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean))
    return max(val, 0.0)


def fid_proxy(images_a: torch.Tensor, images_b: torch.Tensor,
              extractor: PerceptualExtractor) -> float:
    """Frechet distance between pooled extractor features of two image sets."""
    if images_a.dim() != 4 or images_b.dim() != 4:
        raise ValueError("expected (N, C, H, W) image sets")
    if images_a.shape[0] < 2 or images_b.shape[0] < 2:
        raise ValueError("need at least 2 images per set")
    fa = _pooled_features(images_a, extractor)
    fb = _pooled_features(images_b, extractor)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    sig_a = np.cov(fa, rowvar=False)
    sig_b = np.cov(fb, rowvar=False)
    return frechet_distance(mu_a, sig_a, mu_b, sig_b)


@dataclass
class MetricReport:
    """Aggregate scores plus optional per-frame breakdowns."""

    scores: dict[str, float]
    per_frame: dict[str, list[float]] = field(default_factory=dict)

    def format_text(self) -> str:
        lines = [f"{name} = {value:.6f}" if math.isfinite(value) else f"{name} = {value}"
                 for name, value in sorted(self.scores.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {"scores": self.scores, "per_frame": self.per_frame}
