"""Segmentation and continual-learning metrics.

Surfaces are mask voxels with at least one face-adjacent background
neighbour; voxels outside the volume count as background.  Distances are in
physical units given the voxel ``spacing``.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
CSV_FIELDS = ("step", "task", "class", "dsc", "hd95_mm", "asd_mm", "forget_pct")


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError("masks must have equal extents")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, FACE_CONNECTIVITY, border_value=0)


def empty_sentinel(shape, spacing) -> float:
    """Volume diagonal, reported when exactly one mask is empty."""
    return float(np.sqrt(sum((s * sp) ** 2 for s, sp in zip(shape, spacing))))


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray | None:
    """Symmetric surface-to-nearest-surface distances (both directions concatenated).

    Returns an empty array when both masks are empty and ``None`` when only
    one is.
    """
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError("masks must have equal extents")
    if not pred.any() and not gt.any():
        return np.zeros(0)
    if not pred.any() or not gt.any():
        return None
    sp, sg = surface(pred), surface(gt)
    to_gt = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([to_gt[sp], to_pred[sg]])


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    d = surface_distances(pred, gt, spacing)
    if d is None:
        return empty_sentinel(np.shape(pred), spacing)
    return float(np.percentile(d, 95)) if d.size else 0.0


def asd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    d = surface_distances(pred, gt, spacing)
    if d is None:
        return empty_sentinel(np.shape(pred), spacing)
    return float(d.mean()) if d.size else 0.0


def forgetting_rate(snapshot_dsc: float, current_dsc: float) -> float:
    """Relative DSC drop in percent, floored at zero."""
    if snapshot_dsc <= 0:
        raise ValueError("snapshot DSC must be positive")
    return max(0.0, 100.0 * (snapshot_dsc - current_dsc) / snapshot_dsc)


@dataclass
class MetricRow:
    step: int
    task: str
    cls: int
    dsc: float
    hd95_mm: float
    asd_mm: float
    forget_pct: float | None = None
    empty: bool = False

    def csv_row(self) -> dict:
        return {"step": self.step, "task": self.task, "class": self.cls, "dsc": repr(self.dsc),
                "hd95_mm": repr(self.hd95_mm), "asd_mm": repr(self.asd_mm),
                "forget_pct": "" if self.forget_pct is None else f"{self.forget_pct:.2f}"}


def class_metrics(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], classes, spacing,
                  step: int = 0, task: str = "") -> list[MetricRow]:
    """Per-class DSC/HD95/ASD averaged over samples."""
    preds, gts = list(preds), list(gts)
    rows = []
    for c in classes:
        d, h, a, empty = [], [], [], False
        for p, g in zip(preds, gts):
            pm, gm = p == c, g == c
            d.append(dice(pm, gm))
            sd = surface_distances(pm, gm, spacing)
            if sd is None:
                empty = True
                h.append(empty_sentinel(pm.shape, spacing))
                a.append(empty_sentinel(pm.shape, spacing))
            else:
                h.append(float(np.percentile(sd, 95)) if sd.size else 0.0)
                a.append(float(sd.mean()) if sd.size else 0.0)
        rows.append(MetricRow(step, task, int(c), float(np.mean(d)), float(np.mean(h)), float(np.mean(a)),
                              empty=empty))
    return rows


def write_metrics_csv(path: str | Path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_row())


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(MetricRow(int(r["step"]), r["task"], int(r["class"]), float(r["dsc"]),
                                  float(r["hd95_mm"]), float(r["asd_mm"]),
                                  float(r["forget_pct"]) if r["forget_pct"] else None))
    return rows


def as_dict(row: MetricRow) -> dict:
    return asdict(row)
