"""The learned full-modal substitute image and its model-inversion updates."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


class SubstituteImage:
    """One crop-sized N x D x H x W image shared by every subject of a training run.

    It has its own Adam state; gradients come from the same backward pass that
    updates the network.
    """

    def __init__(self, voxels: torch.Tensor, trainable: bool = True):
        self.voxels = torch.nn.Parameter(voxels.detach().clone(), requires_grad=trainable)
        self.optimizer = torch.optim.Adam([self.voxels], lr=0.0) if trainable else None

    @property
    def trainable(self) -> bool:
        return self.voxels.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.voxels.shape)

    def tensor(self) -> torch.Tensor:
        return self.voxels if self.trainable else self.voxels.detach()

    def numpy(self) -> np.ndarray:
        return self.voxels.detach().cpu().numpy().copy()

    def checksum(self) -> str:
        return hashlib.sha256(self.voxels.detach().cpu().numpy().tobytes()).hexdigest()

    def step(self, lr: float) -> None:
        if not self.trainable:
            raise RuntimeError("substitute image is frozen")
        grad = self.voxels.grad
        if grad is None:
            return
        if not torch.isfinite(grad).all():
            bad = int((~torch.isfinite(grad)).sum())
            raise FloatingPointError(
                f"non-finite gradient in substitute image: {bad} of {grad.numel()} entries"
            )
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()

    def zero_grad(self) -> None:
        if self.optimizer is not None:
            self.optimizer.zero_grad(set_to_none=True)

    def state_dict(self) -> dict:
        return {
            "voxels": self.voxels.detach().cpu().clone(),
            "trainable": self.trainable,
            "optimizer": self.optimizer.state_dict() if self.optimizer is not None else None,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "SubstituteImage":
        sub = cls(state["voxels"], trainable=state["trainable"])
        if sub.optimizer is not None and state.get("optimizer"):
            sub.optimizer.load_state_dict(state["optimizer"])
        return sub


def init_substitute(shape, seed: int, dtype=torch.float32) -> SubstituteImage:
    """Standard-normal initialization, reproducible from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    return SubstituteImage(torch.randn(tuple(shape), generator=gen, dtype=dtype))


def inversion_step(x_sub: SubstituteImage, grad: torch.Tensor, lr: float) -> SubstituteImage:
    """Apply one Adam update to ``x_sub`` from a gradient of the pretraining objective."""
    x_sub.voxels.grad = grad.detach().clone().to(x_sub.voxels.dtype)
    x_sub.step(lr)
    return x_sub


def freeze_substitute(x_sub: SubstituteImage) -> SubstituteImage:
    frozen = SubstituteImage(x_sub.voxels, trainable=False)
    return frozen
