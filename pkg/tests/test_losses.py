import math

import numpy as np
import pytest
import torch

from m3ae import losses as L
from m3ae.network import swap_head

torch.set_default_dtype(torch.float32)


def _rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=torch.float64)


class TestReconMse:
    def test_exact_match(self):
        x = _rand(4, 8, 8, 8)
        assert L.recon_mse(x, x).item() == 0.0

    def test_constant_offset(self):
        x = _rand(4, 8, 8, 8)
        assert L.recon_mse(x + 0.1, x).item() == pytest.approx(0.01, abs=1e-12)

    def test_symmetric(self):
        a, b = _rand(2, 4, 4, 4, seed=1), _rand(2, 4, 4, 4, seed=2)
        assert L.recon_mse(a, b).item() == L.recon_mse(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.recon_mse(_rand(4, 4, 4, 4), _rand(4, 4, 4, 2))


class TestL2Reg:
    def test_values(self):
        assert L.l2_reg(torch.zeros(4, 4, 4, 4)).item() == 0.0
        assert L.l2_reg(torch.ones(4, 4, 4, 4)).item() == 1.0

    def test_homogeneity(self):
        x = _rand(4, 4, 4, 4)
        assert L.l2_reg(3.0 * x).item() == pytest.approx(9.0 * L.l2_reg(x).item(), rel=1e-12)


class TestDiceCE:
    def test_perfect_prediction(self):
        gt = (_rand(3, 8, 8, 8) > 0.7).double()
        assert L.dice_ce(gt.clone(), gt).item() <= 1e-4

    def test_perfect_with_empty_channel(self):
        gt = (_rand(3, 8, 8, 8) > 0.7).double()
        gt[2] = 0
        assert L.dice_ce(gt.clone(), gt).item() <= 1e-4

    def test_ce_at_half(self):
        prob = torch.full((1, 8, 8, 8), 0.5, dtype=torch.float64)
        gt = torch.ones_like(prob)
        n = prob.numel()
        smooth = 1e-5
        dice_part = 1 - (2 * 0.5 * n + smooth) / (0.5 * n + n + smooth)
        ce_part = L.dice_ce(prob, gt, smooth).item() - dice_part
        assert ce_part == pytest.approx(math.log(2), abs=1e-6)

    def test_permutation_invariance(self):
        prob, gt = _rand(3, 6, 6, 6, seed=3), (_rand(3, 6, 6, 6, seed=4) > 0.5).double()
        perm = torch.randperm(216, generator=torch.Generator().manual_seed(0))
        p2 = prob.reshape(3, -1)[:, perm].reshape(3, 6, 6, 6)
        g2 = gt.reshape(3, -1)[:, perm].reshape(3, 6, 6, 6)
        assert L.dice_ce(prob, gt).item() == pytest.approx(L.dice_ce(p2, g2).item(), rel=1e-12)

    def test_nan_rejected(self):
        prob = _rand(3, 4, 4, 4)
        prob[0, 0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            L.dice_ce(prob, torch.zeros_like(prob))

    def test_nonnegative(self):
        for seed in range(10):
            assert L.dice_ce(_rand(3, 4, 4, 4, seed=seed), (_rand(3, 4, 4, 4, seed=seed + 50) > 0.5)).item() >= 0


def _logits_for(prob):
    return torch.logit(prob.clamp(1e-12, 1 - 1e-12))


class TestSegLoss:
    def test_perfect_all_scales(self):
        gt = torch.zeros(1, 3, 8, 8, 8, dtype=torch.float64)
        gt[:, :, 2:6, 2:6, 2:6] = 1
        gt[:, 2, 3:5, 3:5, 3:5] = 1
        logits = {a: (gt * 2 - 1) * 40 for a in (1.0, 0.5, 0.25)}
        assert L.seg_loss(logits, gt).item() <= 3e-4

    def test_equal_scales_sum(self):
        gt = (_rand(1, 3, 8, 8, 8, seed=1) > 0.5).double()
        logit = torch.randn(1, 3, 8, 8, 8, dtype=torch.float64)
        one = L.dice_ce(torch.sigmoid(logit), gt).item()
        total = L.seg_loss({a: logit for a in (1.0, 0.5, 0.25)}, gt).item()
        assert total == pytest.approx(3 * one, rel=1e-12)

    def test_additivity(self):
        gt = (_rand(1, 3, 8, 8, 8, seed=1) > 0.5).double()
        logits = {1.0: torch.randn(1, 3, 8, 8, 8, dtype=torch.float64),
                  0.5: torch.randn(1, 3, 4, 4, 4, dtype=torch.float64),
                  0.25: torch.randn(1, 3, 2, 2, 2, dtype=torch.float64)}
        full = L.seg_loss(logits, gt).item()
        partial = L.seg_loss(logits, gt, scales=(1.0, 0.5)).item()
        up = torch.nn.functional.interpolate(logits[0.25], size=(8, 8, 8), mode="trilinear", align_corners=False)
        quarter = L.dice_ce(torch.sigmoid(up), gt).item()
        assert full - partial == pytest.approx(quarter, rel=1e-10)

    def test_missing_scale(self):
        with pytest.raises(KeyError):
            L.seg_loss({1.0: torch.zeros(1, 3, 4, 4, 4)}, torch.zeros(1, 3, 4, 4, 4))


class TestConsistency:
    def test_zero_and_symmetry(self):
        f0, f1 = _rand(8, 2, 2, 2, seed=1), _rand(8, 2, 2, 2, seed=2)
        assert L.consistency(f0, f0).item() == 0.0
        assert L.consistency(f0, f1).item() == L.consistency(f1, f0).item()

    def test_single_coordinate(self):
        f0 = _rand(8, 2, 3, 4)
        f1 = f0.clone()
        f1[3, 1, 2, 0] += 0.25
        assert L.consistency(f0, f1).item() == pytest.approx(0.25 ** 2 / f0.numel(), rel=1e-10)

    def test_gradient_flows_both_ways(self):
        f0 = _rand(4, 2, 2, 2, seed=1).requires_grad_()
        f1 = _rand(4, 2, 2, 2, seed=2).requires_grad_()
        L.consistency(f0, f1).backward()
        assert f0.grad.abs().sum() > 0 and f1.grad.abs().sum() > 0
        torch.testing.assert_close(f0.grad, -f1.grad)


def test_loss_weights_defaults():
    w = L.LossWeights()
    assert (w.lambda_con, w.gamma_reg, w.dice_smooth) == (0.1, 0.005, 1e-5)
    with pytest.raises(ValueError):
        L.LossWeights(lambda_con=-1)


def test_finetune_objective_additive():
    gt = (_rand(1, 3, 8, 8, 8, seed=1) > 0.5).double()
    lg0 = {a: torch.randn(1, 3, 8, 8, 8, dtype=torch.float64) for a in (1.0, 0.5, 0.25)}
    lg1 = {a: torch.randn(1, 3, 8, 8, 8, dtype=torch.float64) for a in (1.0, 0.5, 0.25)}
    f0, f1 = torch.randn(1, 8, 2, 2, 2, dtype=torch.float64), torch.randn(1, 8, 2, 2, 2, dtype=torch.float64)
    w = L.LossWeights()
    total, parts = L.finetune_objective(w, f0, f1, lg0, lg1, gt)
    assert total.item() == w.lambda_con * parts["L_con"].item() + parts["L_seg0"].item() + parts["L_seg1"].item()
    total0, parts0 = L.finetune_objective(L.LossWeights(lambda_con=0.0), f0, f1, lg0, lg1, gt)
    assert total0.item() == parts0["L_seg0"].item() + parts0["L_seg1"].item()


@pytest.mark.parametrize("which", ["recon_mse", "dice_ce", "consistency", "l2_reg"])
def test_gradients_match_finite_differences(which, fd, rel_err):
    g = torch.Generator().manual_seed(7)
    a = torch.rand(3, 6, 6, 6, generator=g, dtype=torch.float64) * 0.8 + 0.1
    b = torch.rand(3, 6, 6, 6, generator=g, dtype=torch.float64)
    if which == "dice_ce":
        b = (b > 0.5).double()
    fn = {
        "recon_mse": lambda: L.recon_mse(a, b),
        "dice_ce": lambda: L.dice_ce(a, b),
        "consistency": lambda: L.consistency(a, b),
        "l2_reg": lambda: L.l2_reg(a),
    }[which]
    a.requires_grad_(True)
    fn().backward()
    grad = a.grad.clone()
    a.requires_grad_(False)
    idx = np.random.default_rng(0).choice(a.numel(), 20, replace=False)
    for i in idx:
        numeric = fd(fn, a, int(i), h=1e-5)
        assert rel_err(grad.view(-1)[i].item(), numeric) < 1e-4


def test_network_loss_gradient(toy_model, fd, rel_err):
    model = swap_head(toy_model, seed=1).double()
    g = torch.Generator().manual_seed(3)
    x = torch.rand(2, 4, 16, 16, 16, generator=g, dtype=torch.float64)
    gt = (torch.rand(1, 3, 16, 16, 16, generator=g, dtype=torch.float64) > 0.6).double()

    def objective():
        out = model(x)
        return L.finetune_objective(L.LossWeights(), out.bottleneck[:1], out.bottleneck[1:],
                                    {k: v[:1] for k, v in out.seg_logits.items()},
                                    {k: v[1:] for k, v in out.seg_logits.items()}, gt, model.seg_scales)[0]

    model.zero_grad()
    objective().backward()
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for _ in range(10):
            p = params[rng.integers(len(params))]
            i = int(rng.integers(p.numel()))
            numeric = fd(objective, p, i, h=1e-6)
            assert rel_err(p.grad.view(-1)[i].item(), numeric) < 1e-4
