"""Pose / layout / flow primitives shared by the dataset generator and the networks.

Conventions used everywhere:
  * images and maps are channel-first float32 torch tensors, values in [-1, 1]
  * coordinates are (x, y) with x along columns, y along rows, pixel centers at integers
  * flow displacement channel 0 is dx, channel 1 is dy, backward convention:
    warp(image, flow)(p) samples image at p + d(p)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import config as C


class EmptyMaskError(ValueError):
    """Raised when an operation needs a non-empty mask."""


@dataclass
class PoseSample:
    """25-keypoint skeleton sample; keypoints may lie outside the frame when invisible."""

    keypoints: np.ndarray          # (25, 2) float, (x, y)
    visible: np.ndarray            # (25,) bool
    image_size: tuple[int, int]    # (H, W)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.keypoints.shape != (len(C.JOINT_NAMES), 2):
            raise ValueError(f"keypoints must be (25, 2), got {self.keypoints.shape}")
        if self.visible.shape != (len(C.JOINT_NAMES),):
            raise ValueError("visible must be (25,)")
        if not np.all(np.isfinite(self.keypoints)):
            raise ValueError("keypoints must be finite")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValueError("image_size must be positive")


@dataclass
class Layout:
    """6-channel body-part layout; soft maps are per-pixel simplexes, hard maps one-hot."""

    channels: torch.Tensor  # (6, H, W)
    kind: str = "soft"      # "soft" | "hard"

    def __post_init__(self):
        if self.channels.dim() != 3 or self.channels.shape[0] != C.NUM_PARTS:
            raise ValueError(f"layout must be ({C.NUM_PARTS}, H, W), got {tuple(self.channels.shape)}")
        if self.kind not in ("soft", "hard"):
            raise ValueError(f"unknown layout kind {self.kind!r}")
        ch = self.channels
        if self.kind == "hard":
            binary = (ch == 0) | (ch == 1)
            if not bool(binary.all()) or not bool((ch.sum(dim=0) == 1).all()):
                raise ValueError("hard layout must be one-hot per pixel")
        else:
            if bool((ch < -1e-5).any()):
                raise ValueError("soft layout has negative values")
            sums = ch.sum(dim=0)
            if not bool(((sums - 1).abs() <= 1e-5).all()):
                raise ValueError("soft layout columns must sum to 1 within 1e-5")

    def to_hard(self) -> "Layout":
        if self.kind == "hard":
            return self
        return Layout(hardened(self.channels), kind="hard")

    @property
    def size(self) -> tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


@dataclass
class FlowField:
    """Dense backward displacement field with an optional per-pixel confidence weight."""

    displacement: torch.Tensor            # (2, H, W)
    weight: torch.Tensor | None = None    # (H, W), clamped to [0, 1]

    def __post_init__(self):
        if self.displacement.dim() != 3 or self.displacement.shape[0] != 2:
            raise ValueError("displacement must be (2, H, W)")
        if not bool(torch.isfinite(self.displacement).all()):
            raise ValueError("displacement must be finite")
        if self.weight is not None:
            if self.weight.shape != self.displacement.shape[1:]:
                raise ValueError("weight must be (H, W) matching the displacement")
            self.weight = self.weight.clamp(0.0, 1.0)


@dataclass
class AffineAlignment:
    """Global scale-and-shift: forward map p = scale * (q - anchor) + anchor + offset."""

    scale: float
    offset: tuple[float, float]
    anchor: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")
        if not all(np.isfinite(v) for v in (*self.offset, *self.anchor)):
            raise ValueError("offset/anchor must be finite")


IDENTITY_ALIGNMENT = AffineAlignment(scale=1.0, offset=(0.0, 0.0))


# ---------------------------------------------------------------------------
# pose rendering

def render_pose_map(pose: PoseSample,
                    size: tuple[int, int] | None = None,
                    edges: tuple[tuple[int, int], ...] = C.DEFAULT_SKELETON_EDGES,
                    stroke_base: float = 3.0) -> torch.Tensor:
    """Rasterize the skeleton as a colored stick figure on a -1 canvas.

    Edges whose endpoints are both visible are drawn as round-capped strokes;
    later edges overwrite earlier ones. Returns a (3, H, W) float32 tensor.
    """
    h, w = size if size is not None else pose.image_size
    canvas = np.full((3, h, w), -1.0, dtype=np.float32)
    colors = C.edge_colors(len(edges))
    radius = pose_stroke_radius(h, w, stroke_base)
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    for idx, (a, b) in enumerate(edges):
        if not (pose.visible[a] and pose.visible[b]):
            continue
        pa, pb = pose.keypoints[a], pose.keypoints[b]
        x0 = max(0, int(np.floor(min(pa[0], pb[0]) - radius - 1)))
        x1 = min(w - 1, int(np.ceil(max(pa[0], pb[0]) + radius + 1)))
        y0 = max(0, int(np.floor(min(pa[1], pb[1]) - radius - 1)))
        y1 = min(h - 1, int(np.ceil(max(pa[1], pb[1]) + radius + 1)))
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(xs[x0:x1 + 1], ys[y0:y1 + 1])
        d = segment_distance(gx, gy, pa, pb)
        hit = d <= radius
        color = np.asarray(colors[idx], dtype=np.float32) * 2.0 - 1.0
        for c in range(3):
            canvas[c, y0:y1 + 1, x0:x1 + 1][hit] = color[c]
    return torch.from_numpy(canvas)


def pose_stroke_radius(height: int, width: int, stroke_base: float = 3.0) -> float:
    return C.pose_stroke_width(height, width, stroke_base) / 2.0


def segment_distance(gx: np.ndarray, gy: np.ndarray, a, b) -> np.ndarray:
    """Distance from grid points to the segment a-b (round caps included)."""
    ab = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    den = float(ab @ ab)
    px = gx - a[0]
    py = gy - a[1]
    if den == 0.0:
        return np.hypot(px, py)
    t = np.clip((px * ab[0] + py * ab[1]) / den, 0.0, 1.0)
    return np.hypot(px - t * ab[0], py - t * ab[1])


# ---------------------------------------------------------------------------
# parsing / layout

def merge_parsing(parsing: torch.Tensor,
                  table: tuple[int, ...] = C.DEFAULT_PARSING_MERGE) -> Layout:
    """Collapse an 18-channel one-hot parsing into the 6-class hard layout."""
    if parsing.dim() != 3 or parsing.shape[0] != C.NUM_PARSING_LABELS:
        raise ValueError(f"parsing must be ({C.NUM_PARSING_LABELS}, H, W)")
    binary = (parsing == 0) | (parsing == 1)
    if not bool(binary.all()) or not bool((parsing.sum(dim=0) == 1).all()):
        raise ValueError("parsing must be one-hot per pixel")
    if len(table) != C.NUM_PARSING_LABELS:
        raise ValueError("merge table must cover all parsing labels")
    lut = torch.as_tensor(table, dtype=torch.long)
    labels = parsing.argmax(dim=0)
    return Layout(hardened_from_labels(lut[labels]), kind="hard")


def hardened_from_labels(labels: torch.Tensor, num_classes: int = C.NUM_PARTS) -> torch.Tensor:
    return F.one_hot(labels.long(), num_classes).permute(2, 0, 1).float()


def hardened(channels: torch.Tensor) -> torch.Tensor:
    """Argmax one-hot of a (C, H, W) or (B, C, H, W) soft map."""
    dim = 0 if channels.dim() == 3 else 1
    idx = channels.argmax(dim=dim)
    one_hot = F.one_hot(idx, channels.shape[dim]).float()
    if channels.dim() == 3:
        return one_hot.permute(2, 0, 1)
    return one_hot.permute(0, 3, 1, 2)


def layout_to_mask(layout: Layout | torch.Tensor) -> torch.Tensor:
    """Binary (H, W) person mask: every pixel whose argmax class is not background."""
    ch = layout.channels if isinstance(layout, Layout) else layout
    if ch.dim() != 3 or ch.shape[0] != C.NUM_PARTS:
        raise ValueError("expected a (6, H, W) layout")
    return (ch.argmax(dim=0) != C.BACKGROUND_PART).float()


def extract_region(image: torch.Tensor, layout: Layout, class_index: int) -> torch.Tensor:
    """Image masked to one foreground class of the hard layout."""
    if not 0 <= class_index < C.NUM_REGIONS:
        raise ValueError(f"class_index must be in [0, {C.NUM_REGIONS}), got {class_index}")
    if image.dim() != 3 or image.shape[1:] != layout.channels.shape[1:]:
        raise ValueError("image and layout sizes differ")
    hard = layout.to_hard()
    return image * hard.channels[class_index:class_index + 1]


def compose_foreground(regions) -> torch.Tensor:
    """Sum of the five per-region images."""
    regions = list(regions)
    if len(regions) != C.NUM_REGIONS:
        raise ValueError(f"expected {C.NUM_REGIONS} region images, got {len(regions)}")
    base = regions[0]
    for r in regions[1:]:
        if r.shape != base.shape:
            raise ValueError("region images must share a shape")
    return torch.stack(regions, dim=0).sum(dim=0)


# ---------------------------------------------------------------------------
# masks / global alignment

def mask_stats(mask: torch.Tensor) -> tuple[float, tuple[float, float]]:
    """Bounding-box height and center (x, y) of a binary (H, W) mask."""
    if mask.dim() != 2:
        raise ValueError("mask must be (H, W)")
    nz = (mask > 0.5).nonzero(as_tuple=False)
    if nz.shape[0] == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    ys = nz[:, 0]
    xs = nz[:, 1]
    y0, y1 = float(ys.min()), float(ys.max())
    x0, x1 = float(xs.min()), float(xs.max())
    height = y1 - y0 + 1.0
    center = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    return height, center


def compute_alignment(mask_source: torch.Tensor, mask_driving: torch.Tensor) -> AffineAlignment:
    """Scale-and-shift mapping the source mask bbox onto the driving mask bbox."""
    h_s, c_s = mask_stats(mask_source)
    h_d, c_d = mask_stats(mask_driving)
    return AffineAlignment(
        scale=h_d / h_s,
        offset=(c_d[0] - c_s[0], c_d[1] - c_s[1]),
        anchor=c_s,
    )


def global_align(image: torch.Tensor, alignment: AffineAlignment) -> torch.Tensor:
    """Resample an image under the alignment's forward map (zeros outside the source)."""
    if image.dim() != 3:
        raise ValueError("image must be (C, H, W)")
    scale = torch.full((1,), alignment.scale, dtype=image.dtype)
    offset = torch.tensor([alignment.offset], dtype=image.dtype)
    anchor = torch.tensor([alignment.anchor], dtype=image.dtype)
    return batch_global_align(image.unsqueeze(0), scale, offset, anchor)[0]


def batch_global_align(images: torch.Tensor, scales: torch.Tensor,
                       offsets: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Batched global_align; scales (B,), offsets (B, 2), anchors (B, 2)."""
    if images.dim() != 4:
        raise ValueError("images must be (B, C, H, W)")
    b, _, h, w = images.shape
    dtype = images.dtype
    ys = torch.arange(h, dtype=dtype)
    xs = torch.arange(w, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    gx = gx.unsqueeze(0).expand(b, -1, -1)
    gy = gy.unsqueeze(0).expand(b, -1, -1)
    s = scales.view(b, 1, 1)
    ox = offsets[:, 0].view(b, 1, 1)
    oy = offsets[:, 1].view(b, 1, 1)
    ax = anchors[:, 0].view(b, 1, 1)
    ay = anchors[:, 1].view(b, 1, 1)
    sx = (gx - ox - ax) / s + ax
    sy = (gy - oy - ay) / s + ay
    grid = torch.stack([_to_sample_coords(sx, w), _to_sample_coords(sy, h)], dim=-1)
    return F.grid_sample(images, grid, mode="bilinear",
                         padding_mode="zeros", align_corners=True)


def _to_sample_coords(coords: torch.Tensor, extent: int) -> torch.Tensor:
    return 2.0 * coords / max(extent - 1, 1) - 1.0


# ---------------------------------------------------------------------------
# warping

def warp(image: torch.Tensor, flow: FlowField) -> torch.Tensor:
    """Backward-warp a (C, H, W) image: output(p) = image(p + d(p)), border padded."""
    if image.dim() != 3:
        raise ValueError("image must be (C, H, W)")
    if flow.displacement.shape[1:] != image.shape[1:]:
        raise ValueError("flow and image sizes differ")
    disp = flow.displacement.to(image.dtype)
    return backward_warp(image.unsqueeze(0), disp.unsqueeze(0))[0]


def backward_warp(images: torch.Tensor, displacement: torch.Tensor) -> torch.Tensor:
    """Batched backward warp with border padding; differentiable in both inputs."""
    if images.dim() != 4 or displacement.dim() != 4 or displacement.shape[1] != 2:
        raise ValueError("expected images (B, C, H, W) and displacement (B, 2, H, W)")
    b, _, h, w = images.shape
    dtype = images.dtype
    ys = torch.arange(h, dtype=dtype)
    xs = torch.arange(w, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    sx = gx.unsqueeze(0) + displacement[:, 0]
    sy = gy.unsqueeze(0) + displacement[:, 1]
    grid = torch.stack([_to_sample_coords(sx, w), _to_sample_coords(sy, h)], dim=-1)
    return F.grid_sample(images, grid, mode="bilinear",
                         padding_mode="border", align_corners=True)
