import math

import pytest
import torch

from gradcheck import REL_TOL, check_module_grads, check_tensor_grad
from motrans.geometry import backward_warp
from motrans.layoutnet import (LayoutGenerator, bootstrap_history, flow_l1,
                               layout_cross_entropy, layout_generator_loss,
                               stack_history)

H, W = 16, 12


def _one_hot_layout(b=1, h=H, w=W, seed=0):
    g = torch.Generator().manual_seed(seed)
    idx = torch.randint(0, 6, (b, h, w), generator=g)
    return torch.nn.functional.one_hot(idx, 6).permute(0, 3, 1, 2).float()


def _inputs(b=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    src = _one_hot_layout(b, seed=seed)
    poses = torch.rand(b, 9, H, W, generator=g)
    hist = stack_history(*bootstrap_history(src))
    return src, poses, hist


def test_forward_shapes_and_simplex():
    gen = LayoutGenerator(base_width=8, n_down=2)
    src, poses, hist = _inputs(b=2)
    res = gen(src, poses, hist)
    for t in (res.raw, res.fused):
        assert t.shape == (2, 6, H, W)
        assert t.min() >= 0
        assert torch.allclose(t.sum(dim=1), torch.ones(2, H, W), atol=1e-5)
    assert res.flow.shape == (2, 2, H, W)
    assert res.weight.shape == (2, 1, H, W)
    assert res.weight.min() > 0 and res.weight.max() < 1


def test_fused_recomputation_from_parts():
    gen = LayoutGenerator(base_width=8, n_down=2)
    src, poses, hist = _inputs()
    res = gen(src, poses, hist)
    prev1 = hist[:, 6:]
    warped = backward_warp(prev1, res.flow)
    expected = res.raw * res.weight + warped * (1 - res.weight)
    expected = expected.clamp_min(0.0)
    expected = expected / expected.sum(dim=1, keepdim=True).clamp_min(1e-8)
    assert torch.equal(res.fused, expected)


def test_history_stacking_order():
    a = torch.full((1, 6, H, W), 0.25)
    b = torch.full((1, 6, H, W), 0.75)
    hist = stack_history(a, b)
    assert hist.shape == (1, 12, H, W)
    assert torch.equal(hist[:, :6], a)
    assert torch.equal(hist[:, 6:], b)


def test_bootstrap_history_copies_source():
    src = _one_hot_layout()
    p2, p1 = bootstrap_history(src)
    assert torch.equal(p2, src) and torch.equal(p1, src)


def test_layout_cross_entropy_zero_iff_equal():
    t = _one_hot_layout(seed=3)
    assert float(layout_cross_entropy(t, t)) == pytest.approx(0.0, abs=1e-6)
    uniform = torch.full_like(t, 1.0 / 6.0)
    assert float(layout_cross_entropy(uniform, t)) == pytest.approx(math.log(6.0), abs=1e-5)
    with pytest.raises(ValueError):
        layout_cross_entropy(t, t[:, :3])


def test_flow_l1_oracle():
    flow = torch.zeros(1, 2, 4, 4)
    target = torch.ones(1, 2, 4, 4)
    weight = torch.zeros(1, 1, 4, 4)
    weight[0, 0, 0, 0] = 1.0
    weight[0, 0, 1, 1] = 1.0
    # only the two confident pixels count, each contributing mean(|0-1|) = 1
    assert float(flow_l1(flow, target, weight)) == pytest.approx(1.0)
    target2 = target.clone()
    target2[0, 0] = 3.0  # per-pixel channel mean becomes (3 + 1) / 2
    assert float(flow_l1(flow, target2, weight)) == pytest.approx(2.0)
    assert float(flow_l1(flow, target, torch.zeros_like(weight))) == 0.0


def test_generator_loss_terms_and_weighting():
    gen = LayoutGenerator(base_width=8, n_down=2)
    src, poses, hist = _inputs(seed=5)
    res = gen(src, poses, hist)
    target = _one_hot_layout(seed=6)
    f_t = torch.zeros(1, 2, H, W)
    f_w = torch.ones(1, 1, H, W)
    terms = layout_generator_loss(res, target, f_t, f_w, lambda_rec=2.0, lambda_flow=3.0)
    assert set(terms) == {"ce_fused", "ce_raw", "flow", "total"}
    expected = 2.0 * (terms["ce_fused"] + terms["ce_raw"]) + 3.0 * terms["flow"]
    assert torch.allclose(terms["total"], expected)


def test_generator_loss_gradients_through_network():
    torch.manual_seed(0)
    gen = LayoutGenerator(base_width=4, n_down=1, n_res=1).double()
    src = _one_hot_layout(seed=1).double()
    poses = torch.rand(1, 9, H, W, dtype=torch.float64)
    hist = stack_history(src, src)
    target = _one_hot_layout(seed=2).double()
    f_t = torch.randn(1, 2, H, W, dtype=torch.float64)
    f_w = torch.rand(1, 1, H, W, dtype=torch.float64)

    def loss_fn():
        res = gen(src, poses, hist)
        return layout_generator_loss(res, target, f_t, f_w)["total"]

    worst = check_module_grads(loss_fn, gen, n_tensors=6, n_probe=2, eps=1e-5)
    assert worst < REL_TOL


def test_flow_receives_gradient_through_warp():
    prev = torch.rand(1, 6, H, W, dtype=torch.float64)
    target = torch.rand(1, 6, H, W, dtype=torch.float64)

    def loss_fn(flow):
        return (backward_warp(prev, flow) - target).abs().mean()

    flow = torch.randn(1, 2, H, W, dtype=torch.float64) * 0.3
    worst = check_tensor_grad(loss_fn, flow, n_probe=6)
    assert worst < REL_TOL
