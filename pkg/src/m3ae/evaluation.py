"""Catch-all inference over modality subsets, DSC / HD95 metrics and benchmark-style reports."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from . import data as D
from .masking import apply_substitution, enumerate_subsets
from .network import UNet3D, seg_probabilities

__all__ = ["enumerate_subsets", "infer", "dsc", "hd95", "evaluate", "SubsetResult", "write_report"]

CSV_COLUMNS = ["subset", "flair", "t1", "t1c", "t2", "region", "case_id", "dsc", "hd95"]
HD95_NOTE = ("# hd95: max of directed 95th percentiles over boundary voxels; "
             "both empty -> 0; one empty -> volume diagonal (mm)")


class EvaluationError(RuntimeError):
    pass


def subset_name(subset: Sequence[int], names=D.MODALITIES) -> str:
    return "+".join(names[i] for i in subset)


def _window_starts(dim: int, window: int) -> list[int]:
    stride = max(window // 2, 1)
    starts = list(range(0, max(dim - window, 0) + 1, stride))
    if starts[-1] + window < dim:
        starts.append(dim - window)
    return starts


@torch.no_grad()
def predict_probabilities(volume: D.MultimodalVolume, kept: Sequence[int], model: UNet3D,
                          fill: torch.Tensor, device: str = "cpu") -> np.ndarray:
    """Sliding-window region probabilities (3 x D x H x W) from the full-resolution head."""
    if model.seg_heads is None:
        raise EvaluationError("model has no segmentation heads; evaluate a fine-tuned checkpoint")
    kept = [int(i) for i in kept]
    if not kept:
        raise EvaluationError("kept subset is empty")
    n = volume.n_modalities
    window = fill.shape[-1]
    missing = [i for i in range(n) if i not in kept or not volume.available[i]]

    vox = volume.voxels
    shape = volume.spatial_shape
    padded = tuple(max(s, window) for s in shape)
    if padded != shape:
        vox = np.pad(vox, [(0, 0)] + [(0, p - s) for p, s in zip(padded, shape)])
    channel_mask = np.zeros((n, 1, 1, 1), dtype=bool)
    channel_mask[missing] = True
    channel_mask = torch.from_numpy(np.broadcast_to(channel_mask, (n,) + (window,) * 3).copy()).to(device)
    fill = fill.detach().to(device)

    acc = np.zeros((model.config.out_regions,) + padded, dtype=np.float64)
    counts = np.zeros(padded, dtype=np.float64)
    model.eval()
    for starts in itertools.product(*(_window_starts(p, window) for p in padded)):
        sl = tuple(slice(s, s + window) for s in starts)
        x = torch.from_numpy(np.ascontiguousarray(vox[(slice(None),) + sl])).to(device)
        x = apply_substitution(x, fill, channel_mask) if missing else x
        out = model(x[None], mode="finetune")
        prob = seg_probabilities({1.0: out.seg_logits[1.0]}, x.shape[1:])[1.0][0]
        acc[(slice(None),) + sl] += prob.cpu().numpy()
        counts[sl] += 1.0
    prob = acc / counts
    return prob[(slice(None),) + tuple(slice(0, s) for s in shape)]


def infer(volume: D.MultimodalVolume, kept: Sequence[int], model: UNet3D, fill: torch.Tensor,
          device: str = "cpu") -> np.ndarray:
    """Label map in {0, 1, 2, 4} for the given kept modalities; missing ones are filled from ``fill``."""
    prob = predict_probabilities(volume, kept, model, fill, device)
    return D.regions_to_labels(prob > 0.5)


def dsc(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


_FACE = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face neighbour outside the mask (volume edge counts as outside)."""
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    spacing = np.asarray(spacing, dtype=float)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if not (has_p and has_g):
        return float(np.sqrt(np.sum((np.asarray(pred.shape) * spacing) ** 2)))
    bp, bg = boundary(pred), boundary(gt)
    to_g = ndimage.distance_transform_edt(~bg, sampling=spacing)[bp]
    to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)[bg]
    return float(max(np.percentile(to_g, 95), np.percentile(to_p, 95)))


@dataclass
class SubsetResult:
    kept_subset: tuple
    case_ids: list = field(default_factory=list)
    dsc: dict = field(default_factory=dict)  # region -> list of per-case values
    hd95: dict = field(default_factory=dict)

    def mean_dsc(self, region: str) -> float:
        return float(np.mean(self.dsc[region]))

    def std_dsc(self, region: str) -> float:
        return float(np.std(self.dsc[region]))


def evaluate(subjects: Sequence[D.Subject], model: UNet3D, fill: torch.Tensor,
             subsets: Sequence[Sequence[int]] | None = None, device: str = "cpu") -> list[SubsetResult]:
    n = subjects[0].volume.n_modalities
    subsets = list(subsets) if subsets is not None else enumerate_subsets(n)
    results = []
    for subset in subsets:
        res = SubsetResult(tuple(subset), dsc={r: [] for r in D.REGIONS}, hd95={r: [] for r in D.REGIONS})
        for subj in subjects:
            if subj.labels is None:
                raise EvaluationError(f"{subj.case_id}: no labels to evaluate against")
            pred = D.labels_to_regions(infer(subj.volume, subset, model, fill, device))
            gt = D.labels_to_regions(subj.labels)
            res.case_ids.append(subj.case_id)
            for r, name in enumerate(D.REGIONS):
                res.dsc[name].append(dsc(pred[r], gt[r]))
                res.hd95[name].append(hd95(pred[r], gt[r], subj.volume.spacing))
        results.append(res)
    return results


def _presence(subset, n):
    return ["1" if i in subset else "0" for i in range(n)]


def per_case_csv(results: Sequence[SubsetResult], n_modalities: int = 4) -> str:
    buf = io.StringIO()
    buf.write(HD95_NOTE + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for res in results:
        for region in D.REGIONS:
            for case, d, h in zip(res.case_ids, res.dsc[region], res.hd95[region]):
                writer.writerow([subset_name(res.kept_subset), *_presence(res.kept_subset, n_modalities),
                                 region, case, f"{d:.6f}", f"{h:.6f}"])
    return buf.getvalue()


def summary_rows(results: Sequence[SubsetResult]) -> list[dict]:
    """Mean and std per (subset, region), followed by a Mean row averaging the subset means."""
    rows = []
    for res in results:
        row = {"subset": subset_name(res.kept_subset)}
        for region in D.REGIONS:
            row[f"{region}_dsc_mean"] = float(np.mean(res.dsc[region]))
            row[f"{region}_dsc_std"] = float(np.std(res.dsc[region]))
            row[f"{region}_hd95_mean"] = float(np.mean(res.hd95[region]))
            row[f"{region}_hd95_std"] = float(np.std(res.hd95[region]))
        rows.append(row)
    mean = {"subset": "Mean"}
    for region in D.REGIONS:
        for metric in ("dsc", "hd95"):
            means = [r[f"{region}_{metric}_mean"] for r in rows]
            mean[f"{region}_{metric}_mean"] = float(np.mean(means))
            mean[f"{region}_{metric}_std"] = float(np.std(means))
    rows.append(mean)
    return rows


def summary_csv(results: Sequence[SubsetResult]) -> str:
    rows = summary_rows(results)
    columns = list(rows[0].keys())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([row["subset"]] + [f"{row[c]:.6f}" for c in columns[1:]])
    return buf.getvalue()


def write_report(results: Sequence[SubsetResult], out_dir, n_modalities: int = 4, plot: bool = True,
                 require_complete: bool = True) -> dict:
    """Write per-case and summary CSVs plus a DSC figure; returns the paths written.

    With ``require_complete`` a report must cover every non-empty modality subset.
    """
    if not results:
        raise EvaluationError("no results to report")
    expected = 2 ** n_modalities - 1
    if require_complete and len(results) != expected:
        raise EvaluationError(f"incomplete results: {len(results)} of {expected} subsets")
    for res in results:
        if any(len(res.dsc[r]) != len(res.case_ids) for r in D.REGIONS):
            raise EvaluationError(f"subset {res.kept_subset}: incomplete per-region values")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out_dir / "metrics.csv", "summary": out_dir / "summary.csv"}
    paths["metrics"].write_text(per_case_csv(results, n_modalities))
    paths["summary"].write_text(summary_csv(results))
    if plot:
        from .plotting import plot_subset_dsc

        paths["figure"] = plot_subset_dsc(summary_rows(results), out_dir / "dsc_by_subset.png")
    return paths


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "subset" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
