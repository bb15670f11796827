"""Masking plans: modality dropout combined with grid-aligned 3D patch masking."""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    dropped: frozenset
    patch_side: int
    patch_grid: np.ndarray  # N x D/ps x H/ps x W/ps, True = masked
    target_rate: float | None = None

    @property
    def n_modalities(self) -> int:
        return self.patch_grid.shape[0]

    @property
    def kept(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_modalities) if i not in self.dropped)

    def voxel_mask(self) -> np.ndarray:
        ps = self.patch_side
        g = self.patch_grid
        return np.repeat(np.repeat(np.repeat(g, ps, axis=1), ps, axis=2), ps, axis=3)

    def to_bytes(self) -> bytes:
        bits = 0
        for i in self.dropped:
            bits |= 1 << int(i)
        head = struct.pack("<6I", bits, self.patch_side, *self.patch_grid.shape)
        return head + np.packbits(self.patch_grid.ravel()).tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MaskSpec":
        bits, ps, *shape = struct.unpack("<6I", raw[:24])
        count = int(np.prod(shape))
        grid = np.unpackbits(np.frombuffer(raw[24:], dtype=np.uint8), count=count).astype(bool)
        dropped = frozenset(i for i in range(32) if bits >> i & 1)
        return cls(dropped, ps, grid.reshape(shape))

    def __eq__(self, other):
        if not isinstance(other, MaskSpec):
            return NotImplemented
        return (self.dropped == other.dropped and self.patch_side == other.patch_side
                and np.array_equal(self.patch_grid, other.patch_grid))

    __hash__ = None


def _grid_shape(vol_shape: Sequence[int], patch_side: int) -> tuple[int, int, int]:
    if any(s % patch_side for s in vol_shape):
        raise SamplingError(f"volume shape {tuple(vol_shape)} not divisible by patch side {patch_side}")
    return tuple(s // patch_side for s in vol_shape)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def patch_ratio(n_modalities: int, n_dropped: int, target_rate: float) -> float:
    """Per-kept-modality patch ratio that realizes ``target_rate`` overall."""
    return (target_rate * n_modalities - n_dropped) / (n_modalities - n_dropped)


def sample_pretrain_mask(n_modalities: int, vol_shape, patch_side: int, target_rate: float,
                         rng: np.random.Generator, patch_masking: bool = True) -> MaskSpec:
    """Drop k ~ U{0..N-1} modalities, then mask patches of the rest so the combined rate is target_rate.

    With ``patch_masking=False`` only the modality dropout is applied.
    """
    if n_modalities < 2:
        raise SamplingError("need at least two modalities")
    if not 0.0 < target_rate < 1.0:
        raise SamplingError(f"target rate {target_rate} outside (0, 1)")
    grid_shape = _grid_shape(vol_shape, patch_side)
    n_patches = int(np.prod(grid_shape))

    k = int(rng.integers(0, n_modalities))
    dropped = frozenset(int(i) for i in rng.choice(n_modalities, size=k, replace=False))
    grid = np.zeros((n_modalities,) + grid_shape, dtype=bool)
    for i in dropped:
        grid[i] = True
    if not patch_masking:
        return MaskSpec(dropped, patch_side, grid, None)

    p = patch_ratio(n_modalities, k, target_rate)
    if not 0.0 <= p <= 1.0:
        raise SamplingError(f"patch ratio {p:.4f} for {k} dropped modalities is outside [0, 1]")
    n_masked = _round_half_up(p * n_patches)
    for i in range(n_modalities):
        if i in dropped:
            continue
        flat = np.zeros(n_patches, dtype=bool)
        flat[rng.choice(n_patches, size=n_masked, replace=False)] = True
        grid[i] = flat.reshape(grid_shape)
    return MaskSpec(dropped, patch_side, grid, target_rate)


def sample_modality_subset(n_modalities: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Return the kept modalities after dropping k ~ U{0..N-1} of them."""
    if n_modalities < 2:
        raise SamplingError("need at least two modalities")
    k = int(rng.integers(0, n_modalities))
    dropped = set(int(i) for i in rng.choice(n_modalities, size=k, replace=False))
    return tuple(i for i in range(n_modalities) if i not in dropped)


def sample_two_distinct_situations(n_modalities: int, rng: np.random.Generator):
    a = sample_modality_subset(n_modalities, rng)
    b = sample_modality_subset(n_modalities, rng)
    while b == a:
        b = sample_modality_subset(n_modalities, rng)
    return a, b


def subset_to_mask(kept: Sequence[int], n_modalities: int, vol_shape, patch_side: int) -> MaskSpec:
    kept = set(int(i) for i in kept)
    if not kept:
        raise SamplingError("kept subset is empty")
    if not kept <= set(range(n_modalities)):
        raise SamplingError(f"kept subset {sorted(kept)} out of range for {n_modalities} modalities")
    grid_shape = _grid_shape(vol_shape, patch_side)
    dropped = frozenset(range(n_modalities)) - kept
    grid = np.zeros((n_modalities,) + grid_shape, dtype=bool)
    for i in dropped:
        grid[i] = True
    return MaskSpec(dropped, patch_side, grid, None)


def masked_fraction(m: MaskSpec) -> float:
    # patches are equal-sized, so the patch fraction is the voxel fraction
    return float(m.patch_grid.mean())


def apply_substitution(x, x_sub, m):
    """Replace masked content of ``x`` with the location-corresponding content of ``x_sub``.

    Works on numpy arrays and torch tensors; ``m`` is a MaskSpec or a boolean voxel mask.
    Leading batch dimensions broadcast.
    """
    mask = m.voxel_mask() if isinstance(m, MaskSpec) else m
    if isinstance(x, np.ndarray):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-4:] != x.shape[-4:] or np.shape(x_sub)[-4:] != x.shape[-4:]:
            raise ValueError(f"shape mismatch: x {x.shape}, x_sub {np.shape(x_sub)}, mask {mask.shape}")
        return np.where(mask, x_sub, x)
    import torch

    if not torch.is_tensor(mask):
        mask = torch.as_tensor(np.asarray(mask, dtype=bool), device=x.device)
    if mask.shape[-4:] != x.shape[-4:] or x_sub.shape[-4:] != x.shape[-4:]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, x_sub {tuple(x_sub.shape)}, mask {tuple(mask.shape)}")
    return torch.where(mask, x_sub, x)


def enumerate_subsets(n_modalities: int) -> list[tuple[int, ...]]:
    """All non-empty modality subsets; for four modalities, in the row order of the benchmark table."""
    if n_modalities < 1:
        raise ValueError("need at least one modality")
    if n_modalities == 4:
        # order of (flair, t1, t1c, t2) rows: monomodal first, full set last
        return [(3,), (2,), (1,), (0,), (2, 3), (1, 2), (0, 1), (1, 3), (0, 3), (0, 2),
                (0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3), (0, 1, 2, 3)]
    return [c for r in range(1, n_modalities + 1)
            for c in itertools.combinations(range(n_modalities), r)]
