"""Body-part and anomaly aware fusion of per-task predictions.

Each task contributes a predicted label map (in global class ids) and a
per-voxel confidence field.  A weighting map combines the task's body-part
prior ``P`` with a smoothed anomaly probability ``eps``; the entropy of the
weighted confidence then picks, per voxel, the most confident task among
those predicting foreground.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .nn.tensor import save_tensor

log = logging.getLogger(__name__)

EPS_CLAMP = 1e-12
TRUNCATE = 3.0
RANGE_TOL = 1e-6


# -- body-part distribution ------------------------------------------------

@dataclass
class BodyPartDistribution:
    """Mean fraction of the labeled-organ bounding box falling in each body part.

    ``fractions[k]`` belongs to body part ``k + 1``; whatever is missing from
    1 lies outside the body.  ``bbox_extent`` is the mean bounding-box size in
    voxels per axis.
    """
    fractions: np.ndarray
    bbox_extent: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n_samples: int = 0

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.bbox_extent = np.asarray(self.bbox_extent, dtype=np.float64)
        if (self.fractions < 0).any() or (self.fractions > 1).any() or self.fractions.sum() > 1 + RANGE_TOL:
            raise ValueError("body-part fractions must lie in [0, 1] and sum to at most 1")

    def to_dict(self) -> dict:
        return {"fractions": self.fractions.tolist(), "bbox_extent": self.bbox_extent.tolist(),
                "n_samples": self.n_samples}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyPartDistribution":
        return cls(np.array(d["fractions"]), np.array(d["bbox_extent"]), int(d["n_samples"]))


def bbox_fractions(label: np.ndarray, bodypart: np.ndarray, n_bodyparts: int):
    """Fractions for one sample, or ``None`` when nothing is labeled."""
    fg = np.asarray(label) > 0
    if not fg.any():
        return None
    idx = np.nonzero(fg)
    box = tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)
    parts = np.asarray(bodypart)[box]
    counts = np.bincount(parts.ravel().astype(np.intp), minlength=n_bodyparts + 1)
    extent = np.array([s.stop - s.start for s in box], dtype=np.float64)
    return counts[1:n_bodyparts + 1] / parts.size, extent


def compute_distribution(labels: Sequence[np.ndarray], bodyparts: Sequence[np.ndarray],
                         n_bodyparts: int = 4) -> BodyPartDistribution:
    rows, extents = [], []
    for i, (lab, bp) in enumerate(zip(labels, bodyparts)):
        r = bbox_fractions(lab, bp, n_bodyparts)
        if r is None:
            log.warning("sample %d has no labeled voxels; skipped", i)
            continue
        rows.append(r[0])
        extents.append(r[1])
    if not rows:
        return BodyPartDistribution(np.zeros(n_bodyparts), np.zeros(3), 0)
    return BodyPartDistribution(np.mean(rows, axis=0), np.mean(extents, axis=0), len(rows))


def dataset_distribution(dataset) -> BodyPartDistribution:
    n = dataset.spec.n_bodyparts if dataset.spec is not None else 4
    return compute_distribution([s.label for s in dataset.samples], [s.bodypart for s in dataset.samples], n)


def anomaly_diameter(masks: Sequence[np.ndarray]) -> float:
    """Mean equivalent-sphere diameter (voxels) of the non-empty anomaly masks."""
    d = [2.0 * (3.0 * float(m.sum()) / (4.0 * np.pi)) ** (1 / 3) for m in masks if np.any(m)]
    return float(np.mean(d)) if d else 0.0


def rasterize_distribution(dist: BodyPartDistribution, bodypart_map: np.ndarray) -> np.ndarray:
    """Per-voxel ``P``: the fraction of the body part containing the voxel (0 outside)."""
    table = np.concatenate([[0.0], dist.fractions])
    bp = np.asarray(bodypart_map).astype(np.intp)
    if bp.min() < 0 or bp.max() >= table.size:
        raise ValueError("body-part map has ids outside the distribution")
    return table[bp]


# -- maps -------------------------------------------------------------------

def gaussian_smooth(volume: np.ndarray, sigma) -> np.ndarray:
    """Separable Gaussian, truncated at 3 sigma and renormalized; edges replicate."""
    volume = np.asarray(volume, dtype=np.float64)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (volume.ndim,))
    if (sig < 0).any():
        raise ValueError("sigma must be non-negative")
    if not sig.any():
        return volume.copy()
    return ndimage.gaussian_filter(volume, sig, mode="nearest", truncate=TRUNCATE)


def _check_unit(name, a):
    a = np.asarray(a, dtype=np.float64)
    if a.size and (a.min() < -RANGE_TOL or a.max() > 1 + RANGE_TOL):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(a, 0.0, 1.0)


def weighting_map(p: np.ndarray, eps: np.ndarray, draft: bool = False) -> np.ndarray:
    """``1 - (1 - P + eps*P)/2``; ``draft`` gives the older ``(1 - P + eps*P)/2``."""
    p, eps = _check_unit("P", p), _check_unit("anomaly", eps)
    if p.shape != eps.shape:
        raise ValueError("P and anomaly maps differ in extents")
    half = 0.5 * (1.0 - p + eps * p)
    return half if draft else 1.0 - half


def confidence_map(m: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    """Entropy term ``-x ln x`` of ``x = m * yhat``; lower means more confident."""
    x = np.clip(_check_unit("M", m) * _check_unit("confidence", yhat), EPS_CLAMP, 1.0)
    return -x * np.log(x)


# -- merging ----------------------------------------------------------------

@dataclass
class MergeContext:
    """One task's inputs to the merge, all on the same voxel grid."""
    task: str
    pred: np.ndarray          # global class ids, 0 = background
    confidence: np.ndarray    # probability of the predicted class
    p_map: np.ndarray         # rasterized (and smoothed) body-part prior
    anomaly: np.ndarray       # smoothed anomaly probability

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.pred, self.confidence, self.p_map, self.anomaly)}
        if len(shapes) != 1:
            raise ValueError(f"task {self.task}: maps differ in extents {shapes}")


def build_context(task: str, probs: np.ndarray, class_ids: Sequence[int], bodypart_map: np.ndarray,
                  dist: BodyPartDistribution, anomaly_prob: np.ndarray, sigma_p=0.0,
                  sigma_eps=0.0) -> MergeContext:
    """Context from a decoder's probabilities (K+1, D, H, W); ``class_ids`` maps channels 1.. to global ids."""
    lut = np.asarray([0] + list(class_ids), dtype=np.int16)
    if lut.size != probs.shape[0]:
        raise ValueError("class ids do not match decoder channels")
    local = probs.argmax(axis=0)
    conf = np.take_along_axis(probs, local[None], axis=0)[0]
    p_map = np.clip(gaussian_smooth(rasterize_distribution(dist, bodypart_map), sigma_p), 0.0, 1.0)
    eps = np.clip(gaussian_smooth(anomaly_prob, sigma_eps), 0.0, 1.0)
    return MergeContext(task, lut[local], conf.astype(np.float64), p_map, eps)


def task_entropies(contexts: Sequence[MergeContext], draft: bool = False) -> np.ndarray:
    return np.stack([confidence_map(weighting_map(c.p_map, c.anomaly, draft), c.confidence) for c in contexts])


def merge_predictions(contexts: Sequence[MergeContext], draft: bool = False):
    """Global label map and the winning task index per voxel (-1 = background)."""
    if not contexts:
        raise ValueError("nothing to merge")
    shape = contexts[0].pred.shape
    if any(c.pred.shape != shape for c in contexts):
        raise ValueError("contexts differ in extents")
    h = task_entropies(contexts, draft)
    preds = np.stack([c.pred for c in contexts])
    fg = preds != 0
    h = np.where(fg, h, np.inf)
    winner = np.argmin(h, axis=0)          # first minimum -> lowest task index
    any_fg = fg.any(axis=0)
    merged = np.where(any_fg, np.take_along_axis(preds, winner[None], axis=0)[0], 0).astype(np.int16)
    return merged, np.where(any_fg, winner, -1)


def simple_ensemble(probs: Sequence[np.ndarray], class_ids: Sequence[Sequence[int]], n_global: int) -> np.ndarray:
    """Comparator: average each global class over the tasks that model it, then argmax."""
    shape = probs[0].shape[1:]
    total = np.zeros((n_global + 1,) + shape)
    count = np.zeros(n_global + 1)
    for p, ids in zip(probs, class_ids):
        for ch, g in enumerate([0] + list(ids)):
            total[g] += p[ch]
            count[g] += 1
    avg = np.where(count[(slice(None),) + (None,) * len(shape)] > 0,
                   total / np.maximum(count, 1)[(slice(None),) + (None,) * len(shape)], -1.0)
    return avg.argmax(axis=0).astype(np.int16)


def win_counts(winner: np.ndarray, tasks: Sequence[str]) -> dict[str, int]:
    return {t: int((winner == i).sum()) for i, t in enumerate(tasks)}


def write_merged(path: str | Path, merged: np.ndarray, names: Sequence[str],
                 wins: dict[str, int] | None = None) -> None:
    """Label map in tensor format plus a ``.names.txt`` sidecar and optional win-count CSV."""
    path = Path(path)
    save_tensor(path, merged.astype(np.float32))
    with open(path.with_suffix(".names.txt"), "w") as fh:
        for i, n in enumerate(names):
            fh.write(f"{i}\t{n}\n")
    if wins is not None:
        with open(path.with_suffix(".wins.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "wins"])
            for t, n in wins.items():
                w.writerow([t, n])
