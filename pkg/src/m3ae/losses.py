"""Training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .network import SEG_SCALES, seg_probabilities

CE_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_con: float = 0.1
    gamma_reg: float = 0.005
    dice_smooth: float = 1e-5

    def __post_init__(self):
        if min(self.lambda_con, self.gamma_reg, self.dice_smooth) < 0:
            raise ValueError("loss weights must be nonnegative")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_mse(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    _check_shapes(x_hat, x)
    return torch.mean((x_hat - x) ** 2)


def l2_reg(x_sub: torch.Tensor) -> torch.Tensor:
    """Mean of squared entries; the caller applies the weight."""
    return torch.mean(x_sub ** 2)


def dice_ce(prob: torch.Tensor, gt: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss averaged over region channels plus voxel-mean binary cross-entropy.

    ``prob`` and ``gt`` are (B,) C x D x H x W; sums run over the spatial axes.
    """
    _check_shapes(prob, gt)
    if torch.isnan(prob).any():
        raise ValueError("NaN in predicted probabilities")
    gt = gt.to(prob.dtype)
    if prob.dim() == 4:
        prob, gt = prob[None], gt[None]
    dims = tuple(range(2, prob.dim()))
    inter = (prob * gt).sum(dims)
    denom = prob.sum(dims) + gt.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    p = prob.clamp(CE_CLAMP, 1 - CE_CLAMP)
    ce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()
    return (1 - dice).mean() + ce


def seg_loss(seg_logits: dict, gt: torch.Tensor, scales=SEG_SCALES, smooth: float = 1e-5) -> torch.Tensor:
    """Unweighted deep-supervision sum of ``dice_ce`` over full-resolution predictions."""
    missing = [a for a in scales if a not in seg_logits]
    if missing:
        raise KeyError(f"missing prediction scales {missing}")
    probs = seg_probabilities({a: seg_logits[a] for a in scales}, gt.shape[-3:])
    return sum(dice_ce(probs[a], gt, smooth) for a in scales)


def consistency(f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of bottleneck features; gradients reach both inputs."""
    _check_shapes(f0, f1)
    return torch.mean((f0 - f1) ** 2)


def finetune_objective(weights: LossWeights, f0, f1, seg_logits0, seg_logits1, gt, scales=SEG_SCALES):
    """Return (total, components) for the two-view fine-tuning objective."""
    l_con = consistency(f0, f1)
    l_seg0 = seg_loss(seg_logits0, gt, scales, weights.dice_smooth)
    l_seg1 = seg_loss(seg_logits1, gt, scales, weights.dice_smooth)
    total = weights.lambda_con * l_con + l_seg0 + l_seg1
    return total, {"L_seg0": l_seg0, "L_seg1": l_seg1, "L_con": l_con}


def pretrain_objective(weights: LossWeights, x_hat, x, x_sub):
    l_mse = recon_mse(x_hat, x)
    l_reg = l2_reg(x_sub)
    total = l_mse + weights.gamma_reg * l_reg
    return total, {"L_mse": l_mse, "L_reg": l_reg}
