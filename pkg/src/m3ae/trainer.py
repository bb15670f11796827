"""Two-stage training: masked-autoencoder pretraining with model inversion, then two-view fine-tuning.

Randomness is derived from ``(seed, stage, epoch, step)`` rather than carried in
a mutable generator, so resuming from an epoch checkpoint replays exactly the
masks, crops and subset pairs an uninterrupted run would have used.
"""

from __future__ import annotations

import ast
import csv
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import data as D
from .inversion import SubstituteImage, freeze_substitute, init_substitute
from .losses import LossWeights, finetune_objective, pretrain_objective
from .masking import MaskSpec, apply_substitution, sample_pretrain_mask, sample_two_distinct_situations
from .network import UNet3D, UNetConfig, build_model, swap_head

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "m3ae-checkpoint"
CHECKPOINT_VERSION = 1
STAGE_IDS = {"pretrain": 1, "finetune": 2}
FILL_MODES = ("inversion", "zero", "mean")


class StageError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 3e-4
    pretrain_epochs: int = 600
    finetune_epochs: int = 300
    batch: int = 2
    crop_side: int = 128
    mask_rate: float = 0.875
    patch_side: int = 16
    lambda_con: float = 0.1
    gamma_reg: float = 0.005
    dice_smooth: float = 1e-5
    seed: int = 0
    base_channels: int = 32
    levels: int = 4
    groups_per_norm: int = 8
    blocks_per_level: int = 2
    checkpoint_every: int = 10
    # ablations
    fill: str = "inversion"
    patch_masking: bool = True
    distill: bool = True

    def __post_init__(self):
        if self.pretrain_epochs <= 0 or self.finetune_epochs <= 0:
            raise D.ConfigError("epochs must be positive")
        if self.lr0 <= 0:
            raise D.ConfigError("lr0 must be positive")
        if self.fill not in FILL_MODES:
            raise D.ConfigError(f"fill must be one of {FILL_MODES}")
        if self.crop_side % self.patch_side or self.crop_side % 2 ** (self.levels - 1):
            raise D.ConfigError("crop_side must be divisible by patch_side and 2**(levels-1)")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_con if self.distill else 0.0, self.gamma_reg, self.dice_smooth)

    def unet_config(self, in_channels: int) -> UNetConfig:
        return UNetConfig(in_channels=in_channels, base_channels=self.base_channels, levels=self.levels,
                          groups_per_norm=self.groups_per_norm, blocks_per_level=self.blocks_per_level)

    def to_dict(self) -> dict:
        return asdict(self)


FULL_CONFIG = TrainConfig()
DESK_CONFIG = TrainConfig(pretrain_epochs=50, finetune_epochs=50, crop_side=32, base_channels=16,
                          blocks_per_level=1, checkpoint_every=10)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, values are Python literals or bare strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise D.ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def load_config(path=None, base: TrainConfig = DESK_CONFIG, **overrides) -> TrainConfig:
    values = base.to_dict()
    if path is not None:
        parsed = parse_config_text(Path(path).read_text())
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(parsed) - known
        if unknown:
            raise D.ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(parsed)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in cfg.to_dict().items())


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def step_rng(seed: int, stage: str, epoch: int, step: int | None = None) -> np.random.Generator:
    key = [seed, STAGE_IDS[stage], epoch] + ([] if step is None else [step])
    return np.random.default_rng(key)


# ---------------------------------------------------------------------------
# training state and checkpoints


@dataclass
class TrainState:
    config: TrainConfig
    model: UNet3D
    optimizer: torch.optim.Optimizer
    substitute: SubstituteImage
    stage: str
    fill_mode: str = "inversion"
    epoch: int = 0
    device: str = "cpu"

    def fill_tensor(self) -> torch.Tensor:
        return self.substitute.tensor()


def _new_optimizer(model: UNet3D, lr0: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr0)


def save_checkpoint(state: TrainState, path, complete: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "config": state.config.to_dict(),
        "net_config": state.model.config.to_dict(),
        "heads": "regression" if state.model.regression_head is not None else "segmentation",
        "params": {k: v.detach().cpu().clone() for k, v in state.model.state_dict().items()},
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "rng": {"torch": torch.get_rng_state(), "seed": state.config.seed},
        "substitute": state.substitute.state_dict(),
        "fill_mode": state.fill_mode,
        "complete": complete,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise StageError(f"{path}: not a checkpoint file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise StageError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> UNet3D:
    model = UNet3D(UNetConfig(**ckpt["net_config"]))
    if ckpt["heads"] == "segmentation":
        model.attach_segmentation_heads()
    model.load_state_dict(ckpt["params"])
    return model


def state_from_checkpoint(ckpt: dict, device: str = "cpu") -> TrainState:
    cfg = TrainConfig(**ckpt["config"])
    model = model_from_checkpoint(ckpt).to(device)
    opt = _new_optimizer(model, cfg.lr0)
    opt.load_state_dict(ckpt["optimizer"])
    sub = SubstituteImage.from_state_dict(ckpt["substitute"])
    torch.set_rng_state(ckpt["rng"]["torch"])
    return TrainState(cfg, model, opt, sub, ckpt["stage"], ckpt["fill_mode"], ckpt["epoch"], device)


# ---------------------------------------------------------------------------
# steps


def _as_tensor(array, device) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array)).to(device)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _mask_digest(mask: MaskSpec) -> str:
    return hashlib.sha1(mask.to_bytes()).hexdigest()[:16]


def prepare_view(subject: D.Subject, crop_side: int, rng: np.random.Generator, augment: bool = True):
    """Crop then augment; returns the subject plus a trace record of the draws."""
    shape = subject.volume.spatial_shape
    offsets = tuple(int(rng.integers(0, s - crop_side + 1)) for s in shape)
    view = D.crop_at(subject, offsets, crop_side)
    draw = D.draw_augmentation(subject.volume.n_modalities, rng) if augment else \
        D.AugmentDraw.identity(subject.volume.n_modalities)
    view = D.apply_augmentation(view, draw)
    record = {"case": subject.case_id, "offsets": offsets,
              "flips": "".join("1" if f else "0" for f in draw.flips),
              "shift": ";".join(f"{v:.6f}" for v in draw.shift),
              "scale": ";".join(f"{v:.6f}" for v in draw.scale)}
    return view, record


def pretrain_step(state: TrainState, subjects: Sequence[D.Subject], rng: np.random.Generator, lr: float,
                  masks: Sequence[MaskSpec] | None = None, augment: bool = True) -> dict:
    """One joint update of the network and the substitute image.

    ``masks`` overrides the sampled masking plans (test hook).
    """
    cfg = state.config
    xs, vmasks, records = [], [], []
    for i, subject in enumerate(subjects):
        if not subject.volume.available.all():
            raise StageError(f"{subject.case_id}: pretraining needs every modality present")
        view, record = prepare_view(subject, cfg.crop_side, rng, augment)
        if masks is None:
            m = sample_pretrain_mask(view.volume.n_modalities, view.volume.spatial_shape, cfg.patch_side,
                                     cfg.mask_rate, rng, patch_masking=cfg.patch_masking)
        else:
            m = masks[i]
        record["mask"] = _mask_digest(m)
        record["dropped"] = "".join(str(j) for j in sorted(m.dropped))
        xs.append(view.volume.voxels)
        vmasks.append(m.voxel_mask())
        records.append(record)

    x = _as_tensor(np.stack(xs), state.device)
    vmask = _as_tensor(np.stack(vmasks), state.device)
    fill = state.fill_tensor()
    x_in = apply_substitution(x, fill, vmask)

    state.optimizer.zero_grad(set_to_none=True)
    state.substitute.zero_grad()
    out = state.model(x_in, mode="pretrain")
    total, parts = pretrain_objective(cfg.weights, out.recon, x, fill)
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite pretraining loss at epoch {state.epoch}")
    total.backward()
    _set_lr(state.optimizer, lr)
    state.optimizer.step()
    if state.substitute.trainable:
        state.substitute.step(lr)
    losses = {k: float(v.item()) for k, v in parts.items()}
    losses["total"] = float(total.item())
    losses["trace"] = records
    return losses


def _view_mask(kept, volume: D.MultimodalVolume, patch_side: int) -> MaskSpec:
    n = volume.n_modalities
    kept_present = [i for i in kept if volume.available[i]]
    dropped = set(range(n)) - set(kept_present)
    grid_shape = tuple(s // patch_side for s in volume.spatial_shape)
    grid = np.zeros((n,) + grid_shape, dtype=bool)
    for i in dropped:
        grid[i] = True
    return MaskSpec(frozenset(dropped), patch_side, grid)


def finetune_step(state: TrainState, subject: D.Subject, rng: np.random.Generator, lr: float,
                  subsets=None, augment: bool = True) -> dict:
    """Two missing-modal views of one crop, distilled at the bottleneck and both segmented.

    ``subsets`` forces the (A, B) kept-modality pair (test hook).
    """
    cfg = state.config
    view, record = prepare_view(subject, cfg.crop_side, rng, augment)
    n = view.volume.n_modalities
    a, b = subsets if subsets is not None else sample_two_distinct_situations(n, rng)
    record["subsets"] = "|".join("".join(str(i) for i in s) for s in (a, b))
    ma, mb = (_view_mask(s, view.volume, cfg.patch_side) for s in (a, b))

    x = _as_tensor(view.volume.voxels, state.device)
    gt = _as_tensor(D.labels_to_regions(view.labels).astype(np.float32), state.device)
    vmask = _as_tensor(np.stack([ma.voxel_mask(), mb.voxel_mask()]), state.device)
    fill = state.fill_tensor()
    x_in = apply_substitution(x.expand(2, *x.shape), fill, vmask)

    state.optimizer.zero_grad(set_to_none=True)
    out = state.model(x_in, mode="finetune")
    logits0 = {k: v[0:1] for k, v in out.seg_logits.items()}
    logits1 = {k: v[1:2] for k, v in out.seg_logits.items()}
    total, parts = finetune_objective(cfg.weights, out.bottleneck[0:1], out.bottleneck[1:2],
                                      logits0, logits1, gt[None], state.model.seg_scales)
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite fine-tuning loss at epoch {state.epoch}")
    total.backward()
    _set_lr(state.optimizer, lr)
    state.optimizer.step()
    losses = {k: float(v.item()) for k, v in parts.items()}
    losses["total"] = float(total.item())
    losses["trace"] = [record]
    return losses


# ---------------------------------------------------------------------------
# stages


PRETRAIN_COLUMNS = ["step", "epoch", "lr", "L_mse", "L_reg", "total"]
FINETUNE_COLUMNS = ["step", "epoch", "lr", "L_seg0", "L_seg1", "L_con", "total"]
TRACE_COLUMNS = ["step", "epoch", "case", "offsets", "flips", "shift", "scale", "mask", "dropped", "subsets"]


def _steps_per_epoch(stage: str, n_subjects: int, batch: int) -> int:
    return math.ceil(n_subjects / batch) if stage == "pretrain" else n_subjects


def _init_pretrain(cfg: TrainConfig, n_modalities: int, subjects, device) -> TrainState:
    model = build_model(cfg.unet_config(n_modalities), seed=cfg.seed).to(device)
    shape = (n_modalities,) + (cfg.crop_side,) * 3
    if cfg.fill == "inversion":
        sub = init_substitute(shape, seed=cfg.seed)
    else:
        sub = SubstituteImage(_fixed_fill(cfg, shape, subjects), trainable=False)
    return TrainState(cfg, model, _new_optimizer(model, cfg.lr0), sub, "pretrain", cfg.fill, 0, device)


def _fixed_fill(cfg: TrainConfig, shape, subjects) -> torch.Tensor:
    if cfg.fill == "zero":
        return torch.zeros(shape)
    if cfg.fill == "mean":
        return torch.from_numpy(D.mean_image(subjects, cfg.crop_side))
    raise ValueError(cfg.fill)


def _init_finetune(cfg: TrainConfig, n_modalities: int, subjects, pretrained, from_scratch, device) -> TrainState:
    ckpt = load_checkpoint(pretrained) if pretrained is not None else None
    if ckpt is not None and ckpt["stage"] != "pretrain":
        raise StageError(f"{pretrained}: expected a pretraining checkpoint, got stage {ckpt['stage']!r}")
    if ckpt is None and not from_scratch:
        raise StageError("fine-tuning needs a pretrained checkpoint (or an explicit from-scratch flag)")
    shape = (n_modalities,) + (cfg.crop_side,) * 3

    if from_scratch:
        model = build_model(cfg.unet_config(n_modalities), seed=cfg.seed)
    else:
        model = model_from_checkpoint(ckpt)
    swap_head(model, seed=cfg.seed + 1)
    model.to(device)

    if cfg.fill == "inversion":
        if ckpt is None:
            raise StageError("inversion fill needs the substitute image from a pretrained checkpoint")
        sub = freeze_substitute(SubstituteImage.from_state_dict(ckpt["substitute"]))
        if sub.shape != shape:
            raise StageError(f"substitute shape {sub.shape} does not match crop shape {shape}")
    else:
        sub = SubstituteImage(_fixed_fill(cfg, shape, subjects), trainable=False)
    return TrainState(cfg, model, _new_optimizer(model, cfg.lr0), sub, "finetune", cfg.fill, 0, device)


def _append_rows(path: Path, columns, rows) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerows(rows)


def _truncate_log(path: Path, last_step: int) -> None:
    """Drop rows past ``last_step`` so a resumed run does not duplicate them."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames
        rows = [r for r in reader if int(r["step"]) <= last_step]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def run_stage(config: TrainConfig, stage: str, subjects: Sequence[D.Subject], out_dir, resume=None,
              pretrained=None, from_scratch: bool = False, device: str = "cpu",
              max_epochs: int | None = None) -> Path:
    """Train one stage and return the path of its final checkpoint.

    ``max_epochs`` stops early after that many completed epochs (used to
    exercise resumption); the schedule still spans the configured length.
    """
    if stage not in STAGE_IDS:
        raise ValueError(f"unknown stage {stage!r}")
    if not subjects:
        raise StageError("no training subjects")
    if os.environ.get("M3AE_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_mod = subjects[0].volume.n_modalities

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt["stage"] != stage:
            raise StageError(f"{resume}: checkpoint is for stage {ckpt['stage']!r}")
        state = state_from_checkpoint(ckpt, device)
        config = state.config
    elif stage == "pretrain":
        state = _init_pretrain(config, n_mod, subjects, device)
    else:
        state = _init_finetune(config, n_mod, subjects, pretrained, from_scratch, device)

    epochs = config.pretrain_epochs if stage == "pretrain" else config.finetune_epochs
    spe = _steps_per_epoch(stage, len(subjects), config.batch)
    total_steps = epochs * spe
    loss_log = out_dir / f"losses_{stage}.csv"
    trace_log = out_dir / f"trace_{stage}.csv"
    columns = PRETRAIN_COLUMNS if stage == "pretrain" else FINETUNE_COLUMNS
    if resume is None:
        for p in (loss_log, trace_log):
            p.unlink(missing_ok=True)
    else:
        for p in (loss_log, trace_log):
            _truncate_log(p, state.epoch * spe - 1)

    stop = epochs if max_epochs is None else min(epochs, max_epochs)
    state.model.train()
    while state.epoch < stop:
        epoch = state.epoch
        order = step_rng(config.seed, stage, epoch).permutation(len(subjects))
        loss_rows, trace_rows = [], []
        for i in range(spe):
            step = epoch * spe + i
            lr = lr_at(step, total_steps, config.lr0)
            rng = step_rng(config.seed, stage, epoch, i)
            if stage == "pretrain":
                batch = [subjects[j] for j in order[i * config.batch:(i + 1) * config.batch]]
                losses = pretrain_step(state, batch, rng, lr)
            else:
                losses = finetune_step(state, subjects[order[i]], rng, lr)
            for rec in losses.pop("trace"):
                trace_rows.append({"step": step, "epoch": epoch, **rec})
            loss_rows.append({"step": step, "epoch": epoch, "lr": repr(lr),
                              **{k: repr(v) for k, v in losses.items()}})
        _append_rows(loss_log, columns, loss_rows)
        _append_rows(trace_log, TRACE_COLUMNS, trace_rows)
        state.epoch += 1
        mean_total = np.mean([float(r["total"]) for r in loss_rows])
        log.info("%s epoch %d/%d mean loss %.5f", stage, state.epoch, epochs, mean_total)
        if state.epoch % config.checkpoint_every == 0 and state.epoch < epochs:
            save_checkpoint(state, out_dir / f"{stage}_epoch{state.epoch:04d}.pt")

    final = out_dir / f"{stage}_last.pt"
    save_checkpoint(state, final, complete=state.epoch >= epochs)
    return final
