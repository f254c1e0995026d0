import math

import numpy as np
import pytest
import torch

from motrans.geometry import FlowField
from motrans.losses import PerceptualExtractor
from motrans.metrics import (MetricReport, fid_proxy, frechet_distance,
                             gaussian_window, lpips_proxy, masked_metric, psnr,
                             ssim, temporal_consistency, to_unit_range)

SEED = 20240601


def _ssim_reference(a: np.ndarray, b: np.ndarray) -> float:
    """Direct double-loop SSIM over valid 11x11 windows of one channel."""
    k = gaussian_window().numpy()
    h, w = a.shape
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for y in range(h - 10):
        for x in range(w - 10):
            pa = a[y:y + 11, x:x + 11]
            pb = b[y:y + 11, x:x + 11]
            mu_a = (pa * k).sum()
            mu_b = (pb * k).sum()
            var_a = (pa * pa * k).sum() - mu_a ** 2
            var_b = (pb * pb * k).sum() - mu_b ** 2
            cov = (pa * pb * k).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(vals))


def test_to_unit_range():
    x = torch.tensor([-1.0, 0.0, 1.0, 2.0, -3.0])
    assert torch.equal(to_unit_range(x), torch.tensor([0.0, 0.5, 1.0, 1.0, 0.0]))


def test_gaussian_window_normalized_and_symmetric():
    k = gaussian_window()
    assert k.shape == (11, 11)
    assert float(k.sum()) == pytest.approx(1.0, abs=1e-12)
    assert torch.allclose(k, k.flip(0)) and torch.allclose(k, k.t())


def test_ssim_against_double_loop_reference():
    rng = np.random.default_rng(SEED)
    a = rng.random((16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal((16, 16)), 0, 1)
    got = ssim(torch.from_numpy(a).unsqueeze(0), torch.from_numpy(b).unsqueeze(0))
    want = _ssim_reference(a, b)
    assert got == pytest.approx(want, abs=1e-6)


def test_ssim_identity_and_bounds():
    torch.manual_seed(0)
    a = torch.rand(3, 16, 16)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, torch.rand(3, 16, 16)) < 1.0
    with pytest.raises(ValueError):
        ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))
    with pytest.raises(ValueError):
        ssim(a, torch.rand(3, 16, 15))


def test_ssim_channels_average():
    torch.manual_seed(1)
    a1 = torch.rand(1, 16, 16)
    a2 = torch.rand(1, 16, 16)
    b1 = torch.rand(1, 16, 16)
    b2 = torch.rand(1, 16, 16)
    stacked = ssim(torch.cat([a1, a2]), torch.cat([b1, b2]))
    assert stacked == pytest.approx((ssim(a1, b1) + ssim(a2, b2)) / 2, abs=1e-9)


def test_psnr_closed_form():
    a = torch.zeros(3, 8, 8, dtype=torch.float64)
    b = torch.full_like(a, 0.1)
    # uniform 0.1 error: mse = 0.01, psnr = 10 log10(1/0.01) = 20 dB
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf
    with pytest.raises(ValueError):
        psnr(a, torch.zeros(3, 8, 9))


def test_masked_metric_restricts_support():
    torch.manual_seed(2)
    a = torch.rand(3, 8, 8)
    b = a.clone()
    b[:, :4] = 0.0  # corrupt the top half
    mask = torch.zeros(1, 8, 8)
    mask[:, 4:] = 1.0
    assert masked_metric(psnr, a, b, mask) == math.inf
    assert masked_metric(psnr, a, b, 1.0 - mask) < math.inf
    # 2-dim masks gain a channel axis
    assert masked_metric(psnr, a, b, mask[0]) == math.inf


def test_temporal_consistency_static_video():
    frames = torch.rand(1, 3, 8, 8).expand(4, 3, 8, 8).contiguous()
    flows = [FlowField(torch.zeros(2, 8, 8), torch.ones(8, 8)) for _ in range(3)]
    assert temporal_consistency(frames, flows) == pytest.approx(1.0, abs=1e-6)


def test_temporal_consistency_hand_oracle():
    # constant frames differing by e: warp is exact, per-step error e, tcm = 1/(1+e)
    e = 0.25
    frames = torch.stack([torch.zeros(3, 8, 8), torch.full((3, 8, 8), e)])
    flows = [FlowField(torch.zeros(2, 8, 8), torch.ones(8, 8))]
    assert temporal_consistency(frames, flows) == pytest.approx(1.0 / (1.0 + e), abs=1e-6)


def test_temporal_consistency_weight_masks_error():
    frames = torch.stack([torch.zeros(3, 8, 8), torch.ones(3, 8, 8)])
    w = torch.zeros(8, 8)
    flows = [FlowField(torch.zeros(2, 8, 8), w)]
    assert temporal_consistency(frames, flows) == 1.0
    with pytest.raises(ValueError):
        temporal_consistency(frames, [])


def test_lpips_proxy_zero_iff_identical():
    ext = PerceptualExtractor(seed=1)
    torch.manual_seed(3)
    a = torch.rand(3, 16, 16)
    assert lpips_proxy(a, a, ext) == 0.0
    assert lpips_proxy(a, torch.rand(3, 16, 16), ext) > 0.0
    with pytest.raises(ValueError):
        lpips_proxy(a, torch.rand(3, 16, 15), ext)


def test_frechet_distance_closed_form():
    # diagonal Gaussians: d^2 = |mu1-mu2|^2 + sum (sqrt(s1) - sqrt(s2))^2
    mu1 = np.array([0.0, 0.0])
    mu2 = np.array([3.0, 4.0])
    s1 = np.diag([1.0, 4.0])
    s2 = np.diag([9.0, 1.0])
    want = 25.0 + (1.0 - 3.0) ** 2 + (2.0 - 1.0) ** 2
    assert frechet_distance(mu1, s1, mu2, s2) == pytest.approx(want, abs=1e-8)
    assert frechet_distance(mu1, s1, mu1, s1) == pytest.approx(0.0, abs=1e-8)


def test_fid_proxy_identical_sets():
    ext = PerceptualExtractor(seed=1)
    torch.manual_seed(4)
    imgs = torch.rand(4, 3, 16, 16)
    assert fid_proxy(imgs, imgs, ext) == pytest.approx(0.0, abs=1e-6)
    shifted = (imgs + 0.5).clamp(0, 1)
    assert fid_proxy(imgs, shifted, ext) > 1e-4
    with pytest.raises(ValueError):
        fid_proxy(imgs[:1], imgs, ext)


def test_metric_report_formatting():
    rep = MetricReport(scores={"psnr": math.inf, "ssim": 0.5})
    text = rep.format_text()
    assert "psnr = inf" in text
    assert "ssim = 0.500000" in text
    assert text.splitlines() == sorted(text.splitlines())
    assert rep.to_json() == {"scores": rep.scores, "per_frame": {}}
