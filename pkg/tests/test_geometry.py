import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motrans import config as C
from motrans.geometry import (EmptyMaskError, FlowField, IDENTITY_ALIGNMENT, Layout,
                              PoseSample, batch_global_align, compose_foreground,
                              compute_alignment, extract_region, global_align,
                              hardened, layout_to_mask, mask_stats, merge_parsing,
                              render_pose_map, segment_distance, warp)


def box_mask(h, w, y0, y1, x0, x1):
    m = torch.zeros(h, w)
    m[y0:y1 + 1, x0:x1 + 1] = 1.0
    return m


# ---------------------------------------------------------------------------
# pose rendering

def test_segment_distance_matches_bruteforce():
    rng = np.random.default_rng(3)
    gx, gy = np.meshgrid(np.arange(12.0), np.arange(10.0))
    a, b = rng.uniform(0, 10, 2), rng.uniform(0, 10, 2)
    d = segment_distance(gx, gy, a, b)
    ts = np.linspace(0, 1, 2001)
    pts = a[None] + ts[:, None] * (b - a)[None]
    brute = np.min(np.hypot(gx[..., None] - pts[:, 0], gy[..., None] - pts[:, 1]),
                   axis=-1)
    assert np.max(np.abs(d - brute)) < 1e-3


def test_segment_distance_degenerate_segment_is_point_distance():
    gx, gy = np.meshgrid(np.arange(5.0), np.arange(5.0))
    a = np.array([2.0, 3.0])
    d = segment_distance(gx, gy, a, a)
    assert np.allclose(d, np.hypot(gx - 2.0, gy - 3.0))


def make_pose(points, visible=None, size=(32, 24)):
    kp = np.zeros((25, 2))
    vis = np.zeros(25, dtype=bool)
    for j, (x, y) in points.items():
        kp[j] = (x, y)
        vis[j] = True
    if visible is not None:
        vis = visible
    return PoseSample(keypoints=kp, visible=vis, image_size=size)


def test_render_pose_map_blank_without_visible_edges():
    pose = make_pose({0: (5, 5)})  # single joint, no complete edge
    img = render_pose_map(pose, (32, 24))
    assert img.shape == (3, 32, 24)
    assert torch.all(img == -1.0)


def test_render_pose_map_stroke_covers_segment():
    # joints 1 (neck) and 8 (mid hip) form a configured edge
    pose = make_pose({1: (12, 6), 8: (12, 20)})
    img = render_pose_map(pose, (32, 24), stroke_base=3.0)
    on = (img > -1.0).any(dim=0)
    # every pixel within the stroke radius of the segment is painted
    radius = C.pose_stroke_width(32, 24) / 2.0
    gx, gy = np.meshgrid(np.arange(24.0), np.arange(32.0))
    dist = segment_distance(gx, gy, np.array([12.0, 6.0]), np.array([12.0, 20.0]))
    expected = torch.from_numpy(dist <= radius)
    assert torch.equal(on, expected)
    assert on.sum() > 0


def test_render_pose_map_edge_color_is_constant_along_stroke():
    pose = make_pose({1: (12, 6), 8: (12, 20)})
    img = render_pose_map(pose, (32, 24))
    on = (img > -1.0).any(dim=0)
    cols = img[:, on]
    assert torch.all(cols == cols[:, :1])


def test_pose_stroke_width_scales_with_resolution():
    assert C.pose_stroke_width(256, 192) == 3
    assert C.pose_stroke_width(64, 48) == max(1, round(3 * 64 / 256))
    assert C.pose_stroke_width(8, 6) == 1


# ---------------------------------------------------------------------------
# layouts and parsing

def test_merge_parsing_lut_exhaustive():
    # one pixel per parsing label; merged class must follow the table exactly
    h, w = 3, 6
    labels = torch.arange(18).reshape(3, 6)
    parsing = torch.nn.functional.one_hot(labels, 18).permute(2, 0, 1).float()
    merged = merge_parsing(parsing)
    got = merged.channels.argmax(dim=0).reshape(-1)
    expected = torch.tensor(C.DEFAULT_PARSING_MERGE)
    assert torch.equal(got, expected)
    assert merged.kind == "hard"


def test_merge_parsing_rejects_soft_input():
    bad = torch.full((18, 2, 2), 1.0 / 18)
    with pytest.raises(ValueError):
        merge_parsing(bad)


def test_layout_soft_validates_simplex():
    ch = torch.full((6, 4, 4), 1.0 / 6)
    Layout(ch)  # fine
    with pytest.raises(ValueError):
        Layout(ch * 2.0)


def test_layout_hard_requires_one_hot():
    ch = torch.zeros(6, 2, 2)
    ch[3] = 1.0
    Layout(ch, kind="hard")
    ch2 = ch.clone()
    ch2[3, 0, 0] = 0.4
    ch2[1, 0, 0] = 0.6
    with pytest.raises(ValueError):
        Layout(ch2, kind="hard")


def test_to_hard_picks_argmax():
    ch = torch.rand(6, 5, 5)
    ch = ch / ch.sum(dim=0, keepdim=True)
    hard = Layout(ch).to_hard()
    assert hard.kind == "hard"
    assert torch.equal(hard.channels.argmax(dim=0), ch.argmax(dim=0))


def test_hardened_batched_matches_unbatched():
    x = torch.rand(2, 6, 4, 4)
    b = hardened(x)
    for i in range(2):
        assert torch.equal(b[i], hardened(x[i]))


def test_layout_to_mask_excludes_background():
    ch = torch.zeros(6, 2, 3)
    ch[5, :, :] = 1.0          # all background
    ch[5, 0, 0] = 0.0
    ch[2, 0, 0] = 1.0          # one bottom pixel
    mask = layout_to_mask(ch)
    assert mask.shape == (2, 3)
    assert mask.sum() == 1.0
    assert mask[0, 0] == 1.0


def test_extract_region_and_compose_foreground_partition():
    # core invariant: five regions are disjoint and sum to image x mask
    torch.manual_seed(0)
    labels = torch.randint(0, 6, (8, 8))
    ch = torch.nn.functional.one_hot(labels, 6).permute(2, 0, 1).float()
    layout = Layout(ch, kind="hard")
    image = torch.rand(3, 8, 8) * 2 - 1
    regions = [extract_region(image, layout, i) for i in range(5)]
    support = torch.stack([(r != 0).any(dim=0) for r in regions]).float()
    assert torch.all(support.sum(dim=0) <= 1.0 + 1e-6)
    composed = compose_foreground(regions)
    assert torch.equal(composed, image * layout_to_mask(ch))


def test_compose_foreground_needs_five_regions():
    r = torch.zeros(3, 4, 4)
    with pytest.raises(ValueError):
        compose_foreground([r, r, r])


# ---------------------------------------------------------------------------
# mask stats and alignment

def test_mask_stats_bbox_oracle():
    m = box_mask(20, 16, 3, 10, 2, 9)
    height, center = mask_stats(m)
    assert height == 8.0
    assert center == (5.5, 6.5)


def test_mask_stats_empty_raises():
    with pytest.raises(EmptyMaskError):
        mask_stats(torch.zeros(4, 4))


def test_compute_alignment_formulas():
    src = box_mask(32, 24, 4, 11, 6, 11)     # h=8, center (8.5, 7.5)
    drv = box_mask(32, 24, 8, 23, 10, 17)    # h=16, center (13.5, 15.5)
    a = compute_alignment(src, drv)
    assert a.scale == pytest.approx(2.0)
    assert a.offset[0] == pytest.approx(13.5 - 8.5)
    assert a.offset[1] == pytest.approx(15.5 - 7.5)
    assert a.anchor == (8.5, 7.5)


def test_global_align_identity():
    img = torch.rand(3, 16, 12)
    out = global_align(img, IDENTITY_ALIGNMENT)
    assert torch.allclose(out, img, atol=1e-6)


def test_global_align_moves_bbox_onto_driving():
    # alignment then resample puts the source bbox on the driving bbox
    src = box_mask(32, 24, 4, 11, 6, 11)
    drv = box_mask(32, 24, 8, 23, 10, 17)
    a = compute_alignment(src, drv)
    warped = (global_align(src.unsqueeze(0), a)[0] > 0.5).float()
    h, c = mask_stats(warped)
    hd, cd = mask_stats(drv)
    assert abs(h - hd) <= 1.0
    assert abs(c[0] - cd[0]) <= 1.0 and abs(c[1] - cd[1]) <= 1.0


def test_batch_global_align_matches_single():
    torch.manual_seed(1)
    imgs = torch.rand(3, 2, 16, 12)
    aligns = [compute_alignment(box_mask(16, 12, 2, 9, 2, 7),
                                box_mask(16, 12, 4, 11, 3, 9)),
              IDENTITY_ALIGNMENT,
              compute_alignment(box_mask(16, 12, 3, 12, 1, 6),
                                box_mask(16, 12, 2, 6, 4, 8))]
    batched = batch_global_align(
        imgs,
        torch.tensor([a.scale for a in aligns]),
        torch.tensor([a.offset for a in aligns]),
        torch.tensor([a.anchor for a in aligns]))
    for i, a in enumerate(aligns):
        assert torch.allclose(batched[i], global_align(imgs[i], a), atol=1e-6)


# ---------------------------------------------------------------------------
# warping

def test_warp_zero_flow_is_identity():
    torch.manual_seed(2)
    img = torch.rand(3, 10, 8) * 2 - 1
    fl = FlowField(displacement=torch.zeros(2, 10, 8))
    assert torch.max(torch.abs(warp(img, fl) - img)) <= 1e-6


def test_warp_integer_translation_oracle():
    # displacement (+2, 0): output(p) = input(x+2, y), border rule at the right edge
    img = torch.arange(12.0).reshape(1, 1, 12).repeat(1, 6, 1)
    fl = FlowField(displacement=torch.stack([torch.full((6, 12), 2.0),
                                             torch.zeros(6, 12)]))
    out = warp(img, fl)
    assert torch.allclose(out[0, :, :10], img[0, :, 2:])
    assert torch.allclose(out[0, :, 10:], torch.full((6, 2), 11.0))


def test_warp_is_linear_in_image():
    torch.manual_seed(3)
    a = torch.rand(3, 9, 7)
    b = torch.rand(3, 9, 7)
    disp = (torch.rand(2, 9, 7) - 0.5) * 3
    fl = FlowField(displacement=disp)
    lhs = warp(2.5 * a - 1.5 * b, fl)
    rhs = 2.5 * warp(a, fl) - 1.5 * warp(b, fl)
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_warp_differentiable_in_flow():
    img = torch.rand(1, 8, 8)
    disp = torch.zeros(2, 8, 8, requires_grad=True) + 0.3
    disp.retain_grad()
    out = warp(img, FlowField(displacement=disp))
    out.sum().backward()
    assert disp.grad is not None and torch.isfinite(disp.grad).all()


@settings(max_examples=25, deadline=None)
@given(dx=st.floats(-3, 3), dy=st.floats(-3, 3))
def test_warp_constant_flow_shifts_constant_image(dx, dy):
    img = torch.full((1, 8, 8), 0.7)
    disp = torch.stack([torch.full((8, 8), float(dx)), torch.full((8, 8), float(dy))])
    out = warp(img, FlowField(displacement=disp))
    assert torch.allclose(out, img, atol=1e-6)  # constant image is shift-invariant


def random_alignment_pair(rng, h=32, w=24):
    """Two boxes whose aligned source stays inside the frame (no border clipping)."""
    while True:
        bh_s = int(rng.integers(5, 20))
        bw_s = int(rng.integers(4, 16))
        bh_d = int(rng.integers(5, 20))
        bw_d = int(rng.integers(4, 16))
        scale = bh_d / bh_s
        half_w = bw_s * scale / 2 + 1
        half_h = bh_d / 2 + 1
        y0s = int(rng.integers(0, h - bh_s))
        x0s = int(rng.integers(0, w - bw_s))
        y0d = int(rng.integers(0, h - bh_d))
        x0d = int(rng.integers(0, w - bw_d))
        cdx = x0d + (bw_d - 1) / 2
        cdy = y0d + (bh_d - 1) / 2
        if (cdx - half_w >= 0 and cdx + half_w <= w - 1
                and cdy - half_h >= 0 and cdy + half_h <= h - 1):
            return (box_mask(h, w, y0s, y0s + bh_s - 1, x0s, x0s + bw_s - 1),
                    box_mask(h, w, y0d, y0d + bh_d - 1, x0d, x0d + bw_d - 1))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_alignment_bbox_property(seed):
    src, drv = random_alignment_pair(np.random.default_rng(seed))
    a = compute_alignment(src, drv)
    warped = (global_align(src.unsqueeze(0), a)[0] > 0.5).float()
    hh, cc = mask_stats(warped)
    hd, cd = mask_stats(drv)
    assert abs(hh - hd) <= 1.0
    assert abs(cc[0] - cd[0]) <= 1.0 and abs(cc[1] - cd[1]) <= 1.0
