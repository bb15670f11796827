"""Volume containers, phantom generation, file ingestion, preprocessing and augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

MODALITIES = ("flair", "t1", "t1c", "t2")
# BraTS file suffixes, in canonical channel order
NIFTI_SUFFIXES = ("flair", "t1", "t1ce", "t2")
LABEL_VALUES = (0, 1, 2, 4)
REGIONS = ("WT", "TC", "ET")

VOLUME_MAGIC = b"M3AEVOL1"
VOLUME_SUFFIX = ".m3v"


class ConfigError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


class PreprocessingError(ValueError):
    pass


@dataclass
class MultimodalVolume:
    voxels: np.ndarray  # N x D x H x W float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    available: np.ndarray | None = None
    # per-modality foreground; preprocessing keeps it so a second pass sees the same voxels
    foreground: np.ndarray | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 4:
            raise ValueError(f"expected N x D x H x W voxels, got shape {self.voxels.shape}")
        if self.voxels.shape[0] < 2:
            raise ValueError("a multimodal volume needs at least two modalities")
        if self.available is None:
            self.available = np.ones(self.voxels.shape[0], dtype=bool)
        self.available = np.asarray(self.available, dtype=bool)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def n_modalities(self) -> int:
        return self.voxels.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape[1:])


@dataclass
class LabelVolume:
    labels: np.ndarray  # D x H x W uint8 in {0, 1, 2, 4}

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        bad = np.setdiff1d(np.unique(self.labels), LABEL_VALUES)
        if bad.size:
            raise ValueError(f"unknown label values {bad.tolist()}")


class Subject(NamedTuple):
    volume: MultimodalVolume
    labels: LabelVolume | None
    case_id: str = ""


# tissue columns: brain, edema, necrotic/non-enhancing core, enhancing tumor
DEFAULT_CONTRAST_MEANS = (
    (0.35, 0.85, 0.75, 0.75),  # flair: whole tumor bright, core and enhancing identical
    (0.55, 0.40, 0.20, 0.20),  # t1: core dark, edema faint
    (0.45, 0.52, 0.20, 0.90),  # t1c: enhancing bright, necrosis dark
    (0.35, 0.80, 0.95, 0.78),  # t2: core brightest, enhancing close to edema
)
DEFAULT_CONTRAST_STDS = ((0.04, 0.04, 0.04, 0.04),) * 4


@dataclass(frozen=True)
class PhantomConfig:
    subject_count: int = 50
    volume_side: int = 32
    modality_count: int = 4
    contrast_means: tuple = DEFAULT_CONTRAST_MEANS
    contrast_stds: tuple = DEFAULT_CONTRAST_STDS
    noise_sigma: float = 0.03
    seed: int = 0
    patch_side: int = 16
    intensity_scale: float = 1000.0

    def validate(self) -> None:
        if self.subject_count < 1:
            raise ConfigError("subject_count must be positive")
        if self.modality_count < 2:
            raise ConfigError("need at least two modalities")
        side = self.volume_side
        if side <= 0 or side % 8 or side % self.patch_side:
            raise ConfigError(
                f"volume_side={side} must be divisible by 8 and by patch_side={self.patch_side}"
            )
        means = np.asarray(self.contrast_means, dtype=float)
        stds = np.asarray(self.contrast_stds, dtype=float)
        if means.shape != (self.modality_count, 4) or stds.shape != means.shape:
            raise ConfigError("contrast profiles must be modality_count x 4 (brain, edema, core, enhancing)")
        if np.any(stds < 0) or self.noise_sigma < 0:
            raise ConfigError("standard deviations must be nonnegative")
        if len({tuple(r) for r in means.tolist()}) != self.modality_count:
            raise ConfigError("contrast profiles must differ across modalities")


def _ellipsoid(grid: np.ndarray, center, axes, rot: np.ndarray) -> np.ndarray:
    # grid: 3 x D x H x W voxel coordinates
    local = np.einsum("ij,j...->i...", rot.T, grid - np.asarray(center)[:, None, None, None])
    return sum((local[i] / axes[i]) ** 2 for i in range(3)) <= 1.0


def _phantom_subject(cfg: PhantomConfig, index: int) -> tuple[MultimodalVolume, LabelVolume]:
    rng = np.random.default_rng([cfg.seed, index])
    side = cfg.volume_side
    grid = np.stack(np.meshgrid(*(np.arange(side, dtype=float),) * 3, indexing="ij"))
    mid = (side - 1) / 2.0

    brain_axes = side * rng.uniform(0.40, 0.46, size=3)
    brain_center = mid + rng.uniform(-0.5, 0.5, size=3)
    brain = _ellipsoid(grid, brain_center, brain_axes, np.eye(3))

    rot = Rotation.random(random_state=rng).as_matrix()
    wt_axes = side * rng.uniform(0.14, 0.24, size=3)
    room = np.maximum(brain_axes.min() - wt_axes.max() - 1.0, 0.0)
    wt_center = brain_center + rng.uniform(-0.5, 0.5, size=3) * room
    tc_axes = wt_axes * rng.uniform(0.45, 0.70, size=3)
    et_axes = tc_axes * rng.uniform(0.40, 0.65, size=3)

    wt = _ellipsoid(grid, wt_center, wt_axes, rot) & brain
    tc = _ellipsoid(grid, wt_center, tc_axes, rot) & wt
    et = _ellipsoid(grid, wt_center, et_axes, rot) & tc

    labels = np.zeros((side,) * 3, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4

    tissue = np.full(labels.shape, -1, dtype=np.int64)
    tissue[brain] = 0
    tissue[labels == 2] = 1
    tissue[labels == 1] = 2
    tissue[labels == 4] = 3

    means = np.asarray(cfg.contrast_means, dtype=float)
    stds = np.asarray(cfg.contrast_stds, dtype=float)
    n = cfg.modality_count
    vox = np.zeros((n,) + labels.shape, dtype=np.float64)
    inside = tissue >= 0
    t = tissue[inside]
    for m in range(n):
        values = means[m, t] + stds[m, t] * rng.standard_normal(t.size)
        values += cfg.noise_sigma * rng.standard_normal(t.size)
        vox[m][inside] = np.clip(values, 0.01, None) * cfg.intensity_scale
    return MultimodalVolume(vox.astype(np.float32)), LabelVolume(labels)


def generate_phantom(cfg: PhantomConfig) -> list[tuple[MultimodalVolume, LabelVolume]]:
    """Render synthetic multimodal tumour phantoms.

    Each subject is seeded from ``(cfg.seed, index)`` so outputs do not depend on
    subject_count or generation order.
    """
    cfg.validate()
    return [_phantom_subject(cfg, i) for i in range(cfg.subject_count)]


# ---------------------------------------------------------------------------
# file formats


def write_volume_file(path, array: np.ndarray) -> None:
    """Write the raw volume format: magic, uint32 N/D/H/W, then channel-major voxels."""
    array = np.asarray(array)
    if array.ndim == 3:
        array = array[None]
    if array.dtype == np.uint8:
        payload = array.tobytes(order="C")
    else:
        payload = array.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<4I", *array.shape))
        fh.write(payload)


def read_volume_file(path, dtype=np.float32) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    header = len(VOLUME_MAGIC) + 16
    if len(raw) < header or raw[: len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise IngestionError(f"{path}: bad volume header")
    shape = struct.unpack("<4I", raw[len(VOLUME_MAGIC) : header])
    dt = np.dtype("u1") if np.dtype(dtype) == np.uint8 else np.dtype("<f4")
    count = int(np.prod(shape))
    if len(raw) - header != count * dt.itemsize:
        raise IngestionError(f"{path}: payload size does not match header shape {shape}")
    return np.frombuffer(raw, dtype=dt, offset=header).reshape(shape).copy()


def save_subject(directory, volume: MultimodalVolume, labels: LabelVolume | None, case_id: str) -> Path:
    directory = Path(directory) / case_id
    directory.mkdir(parents=True, exist_ok=True)
    write_volume_file(directory / f"{case_id}{VOLUME_SUFFIX}", volume.voxels)
    if labels is not None:
        write_volume_file(directory / f"{case_id}_seg{VOLUME_SUFFIX}", labels.labels.astype(np.uint8))
    return directory


def _load_nifti(path: Path):
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
    except Exception as exc:  # nibabel raises several unrelated types
        raise IngestionError(f"{path}: cannot read NIfTI ({exc})") from exc
    return data, tuple(float(z) for z in img.header.get_zooms()[:3])


def load_subject(directory) -> tuple[MultimodalVolume, LabelVolume]:
    """Load one case directory, either BraTS-style NIfTI files or the raw volume format.

    Missing NIfTI modalities are zero-filled and flagged unavailable.
    """
    directory = Path(directory)
    case = directory.name
    raw_vol = directory / f"{case}{VOLUME_SUFFIX}"
    if raw_vol.exists():
        vox = read_volume_file(raw_vol)
        seg = directory / f"{case}_seg{VOLUME_SUFFIX}"
        if not seg.exists():
            raise IngestionError(f"{directory}: missing label file {seg.name}")
        lab = read_volume_file(seg, dtype=np.uint8)
        if lab.shape[0] != 1 or lab.shape[1:] != vox.shape[1:]:
            raise IngestionError(f"{seg}: label shape {lab.shape[1:]} does not match image {vox.shape[1:]}")
        return MultimodalVolume(vox), LabelVolume(lab[0])

    seg = directory / f"{case}_seg.nii.gz"
    if not seg.exists():
        raise IngestionError(f"{directory}: missing label file {seg.name}")
    channels, available, spacing = [], [], None
    for suffix in NIFTI_SUFFIXES:
        path = directory / f"{case}_{suffix}.nii.gz"
        if not path.exists():
            channels.append(None)
            available.append(False)
            continue
        data, zooms = _load_nifti(path)
        if channels and any(c is not None and c.shape != data.shape for c in channels):
            raise IngestionError(f"{path}: shape {data.shape} differs from other modalities")
        channels.append(data.astype(np.float32))
        available.append(True)
        spacing = spacing or zooms
    if not any(available):
        raise IngestionError(f"{directory}: no modality files found")
    shape = next(c.shape for c in channels if c is not None)
    labels, _ = _load_nifti(seg)
    if labels.shape != shape:
        raise IngestionError(f"{seg}: label shape {labels.shape} does not match image {shape}")
    vox = np.stack([c if c is not None else np.zeros(shape, np.float32) for c in channels])
    try:
        lab = LabelVolume(np.rint(labels).astype(np.uint8))
    except ValueError as exc:
        raise IngestionError(f"{seg}: {exc}") from exc
    return MultimodalVolume(vox, spacing=spacing, available=np.array(available)), lab


def list_cases(directory) -> list[Path]:
    directory = Path(directory)
    cases = sorted(p for p in directory.iterdir() if p.is_dir() and (
        (p / f"{p.name}{VOLUME_SUFFIX}").exists() or any(p.glob(f"{p.name}_*.nii.gz"))))
    if not cases:
        raise IngestionError(f"{directory}: no case directories")
    return cases


def load_dataset(directory, preprocessed: bool = True) -> list[Subject]:
    subjects = []
    for case_dir in list_cases(directory):
        vol, lab = load_subject(case_dir)
        if preprocessed:
            vol = preprocess(vol)
        subjects.append(Subject(vol, lab, case_dir.name))
    return subjects


# ---------------------------------------------------------------------------
# preprocessing and augmentation


def preprocess(v: MultimodalVolume) -> MultimodalVolume:
    """Clip each available modality to its [1st, 99th] foreground percentiles and rescale to [0, 1].

    Percentiles use nearest ranks (lower for p1, higher for p99) over the
    foreground voxels, which makes a second application an exact no-op.
    """
    fg = v.foreground if v.foreground is not None else v.voxels != 0
    out = np.zeros_like(v.voxels)
    for m in range(v.n_modalities):
        if not v.available[m]:
            continue
        values = v.voxels[m][fg[m]]
        if values.size == 0:
            raise PreprocessingError(f"modality {m} has no nonzero voxels")
        lo = np.percentile(values, 1, method="lower")
        hi = np.percentile(values, 99, method="higher")
        if hi <= lo:
            continue  # degenerate: foreground maps to 0
        scaled = (np.clip(values, lo, hi) - lo) / (hi - lo)
        out[m][fg[m]] = scaled
    return replace(v, voxels=out, foreground=fg.copy())


def random_crop(subject: Subject, crop_side: int, rng: np.random.Generator) -> Subject:
    vol = subject.volume
    shape = vol.spatial_shape
    if any(crop_side > s for s in shape):
        raise ValueError(f"crop side {crop_side} exceeds volume shape {shape}")
    offsets = tuple(int(rng.integers(0, s - crop_side + 1)) for s in shape)
    return crop_at(subject, offsets, crop_side)


def crop_at(subject: Subject, offsets: Sequence[int], crop_side: int) -> Subject:
    sl = tuple(slice(o, o + crop_side) for o in offsets)
    vol = subject.volume
    fg = vol.foreground[(slice(None),) + sl] if vol.foreground is not None else None
    new_vol = replace(vol, voxels=vol.voxels[(slice(None),) + sl].copy(), foreground=fg)
    labels = LabelVolume(subject.labels.labels[sl].copy()) if subject.labels is not None else None
    return Subject(new_vol, labels, subject.case_id)


@dataclass(frozen=True)
class AugmentDraw:
    shift: np.ndarray
    scale: np.ndarray
    flips: tuple[bool, bool, bool] = (False, False, False)

    @classmethod
    def identity(cls, n_modalities: int) -> "AugmentDraw":
        return cls(np.zeros(n_modalities), np.ones(n_modalities))


def draw_augmentation(n_modalities: int, rng: np.random.Generator) -> AugmentDraw:
    shift = rng.uniform(-0.1, 0.1, size=n_modalities)
    scale = rng.uniform(0.9, 1.1, size=n_modalities)
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    return AugmentDraw(shift, scale, flips)


def apply_augmentation(subject: Subject, draw: AugmentDraw) -> Subject:
    vol = subject.volume
    shift = np.asarray(draw.shift, dtype=np.float32)[:, None, None, None]
    scale = np.asarray(draw.scale, dtype=np.float32)[:, None, None, None]
    vox = (vol.voxels + shift) * scale
    labels = subject.labels.labels if subject.labels is not None else None
    fg = vol.foreground
    for axis, flip in enumerate(draw.flips):
        if flip:
            vox = np.flip(vox, axis=axis + 1)
            if labels is not None:
                labels = np.flip(labels, axis=axis)
            if fg is not None:
                fg = np.flip(fg, axis=axis + 1)
    new_vol = replace(vol, voxels=np.ascontiguousarray(vox),
                      foreground=None if fg is None else np.ascontiguousarray(fg))
    new_labels = LabelVolume(np.ascontiguousarray(labels)) if labels is not None else None
    return Subject(new_vol, new_labels, subject.case_id)


def augment(subject: Subject, rng: np.random.Generator) -> Subject:
    """Intensity shift, then intensity scale (both per modality), then per-axis flips."""
    return apply_augmentation(subject, draw_augmentation(subject.volume.n_modalities, rng))


def labels_to_regions(labels: LabelVolume | np.ndarray) -> np.ndarray:
    """Map labels {0,1,2,4} to boolean (WT, TC, ET) channels."""
    lab = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
    bad = np.setdiff1d(np.unique(lab), LABEL_VALUES)
    if bad.size:
        raise ValueError(f"unknown label values {bad.tolist()}")
    wt = lab > 0
    tc = (lab == 1) | (lab == 4)
    et = lab == 4
    return np.stack([wt, tc, et])


def regions_to_labels(regions: np.ndarray) -> np.ndarray:
    """Resolve (WT, TC, ET) channels into exclusive labels with precedence ET > TC > WT."""
    wt, tc, et = (np.asarray(r, dtype=bool) for r in regions)
    labels = np.zeros(wt.shape, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    return labels


def mean_image(subjects: Sequence[Subject], crop_side: int) -> np.ndarray:
    """Voxelwise mean of centre crops, used by the mean-fill ablation."""
    acc = None
    for s in subjects:
        shape = s.volume.spatial_shape
        offsets = [(d - crop_side) // 2 for d in shape]
        vox = crop_at(s, offsets, crop_side).volume.voxels.astype(np.float64)
        acc = vox if acc is None else acc + vox
    return (acc / len(subjects)).astype(np.float32)
