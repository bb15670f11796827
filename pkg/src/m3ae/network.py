"""Residual 3D U-Net with a swappable regression head and deep-supervised segmentation heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

SEG_SCALES = (1.0, 0.5, 0.25)


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 16
    levels: int = 4
    groups_per_norm: int = 8
    out_regions: int = 3
    blocks_per_level: int = 2

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels % min(self.groups_per_norm, self.base_channels):
            raise ValueError("base_channels must be divisible by the group count")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    bottleneck: torch.Tensor
    decoder_feats: list  # index l holds the 1/2**l scale
    recon: torch.Tensor | None = None
    seg_logits: dict | None = None  # scale -> logits at native resolution


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class ResBlock(nn.Module):
    """Pre-activation residual block: (GN, ReLU, conv) twice plus identity."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = _norm(channels, groups)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels, groups)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        y = self.conv2(F.relu(self.norm2(y)))
        return x + y


class UNet3D(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        w = config.widths()
        g = config.groups_per_norm
        nb = config.blocks_per_level

        self.stem = nn.Conv3d(config.in_channels, w[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.enc_blocks = nn.ModuleList()
        for l in range(config.levels):
            if l > 0:
                self.down.append(nn.Conv3d(w[l - 1], w[l], 3, stride=2, padding=1))
            self.enc_blocks.append(nn.Sequential(*[ResBlock(w[l], g) for _ in range(nb)]))

        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for l in range(config.levels - 2, -1, -1):
            self.up.append(nn.Conv3d(w[l + 1], w[l], 1))
            self.fuse.append(nn.Conv3d(2 * w[l], w[l], 1))
            self.dec_blocks.append(nn.Sequential(*[ResBlock(w[l], g) for _ in range(nb)]))

        self.regression_head: nn.Conv3d | None = nn.Conv3d(w[0], config.in_channels, 1)
        self.seg_heads: nn.ModuleDict | None = None

    @property
    def seg_scales(self) -> tuple[float, ...]:
        return tuple(a for i, a in enumerate(SEG_SCALES) if i < self.config.levels)

    def backbone_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith(("regression_head", "seg_heads")):
                yield name, p

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def attach_segmentation_heads(self) -> None:
        w = self.config.widths()
        heads = {}
        for i, _ in enumerate(self.seg_scales):
            heads[str(i)] = nn.Conv3d(w[i], self.config.out_regions, 1)
        self.seg_heads = nn.ModuleDict(heads)
        self.regression_head = None

    def encode(self, x):
        factor = 2 ** (self.config.levels - 1)
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor}")
        skips = []
        h = self.stem(x)
        for l, block in enumerate(self.enc_blocks):
            if l > 0:
                h = self.down[l - 1](h)
            h = block(h)
            skips.append(h)
        return skips

    def decode(self, skips):
        h = skips[-1]
        feats = [None] * self.config.levels
        feats[-1] = h
        for i, l in enumerate(range(self.config.levels - 2, -1, -1)):
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False)
            h = self.up[i](h)
            h = self.fuse[i](torch.cat([h, skips[l]], dim=1))
            h = self.dec_blocks[i](h)
            feats[l] = h
        return feats

    def forward(self, x, mode: str | None = None) -> ForwardOutput:
        if mode is None:
            mode = "pretrain" if self.regression_head is not None else "finetune"
        skips = self.encode(x)
        feats = self.decode(skips)
        out = ForwardOutput(bottleneck=skips[-1], decoder_feats=feats)
        if mode == "pretrain":
            if self.regression_head is None:
                raise RuntimeError("regression head has been replaced; use finetune mode")
            out.recon = self.regression_head(feats[0])
        elif mode == "finetune":
            if self.seg_heads is None:
                raise RuntimeError("segmentation heads not attached")
            out.seg_logits = {a: self.seg_heads[str(i)](feats[i]) for i, a in enumerate(self.seg_scales)}
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return out


def seg_probabilities(seg_logits: dict, size) -> dict:
    """Upsample each scale's logits trilinearly to ``size`` and apply the sigmoid."""
    probs = {}
    for a, logits in seg_logits.items():
        if tuple(logits.shape[2:]) != tuple(size):
            logits = F.interpolate(logits, size=tuple(size), mode="trilinear", align_corners=False)
        probs[a] = torch.sigmoid(logits)
    return probs


def swap_head(model: UNet3D, seed: int | None = None) -> UNet3D:
    """Replace the regression head with freshly initialized segmentation heads, in place."""
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        model.attach_segmentation_heads()
    return model


def build_model(config: UNetConfig, seed: int | None = None) -> UNet3D:
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return UNet3D(config)
