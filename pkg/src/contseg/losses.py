"""Training objectives.

All losses take per-voxel probabilities shaped (N, K, D, H, W) and return a
:class:`LossValue` whose gradient is taken w.r.t. those probabilities.  Logs
are natural and inputs are clamped at ``EPS_LOG`` first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

EPS_LOG = 1e-12
DICE_SMOOTH = 1e-5
UNKD_WEIGHT = 10.0
POD_FACTOR = 0.001


@dataclass
class LossValue:
    value: float
    grad: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise FloatingPointError("non-finite loss value")

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(self.value + other.value, self.grad + other.grad)

    def scaled(self, w: float) -> "LossValue":
        return LossValue(w * self.value, self.grad * np.asarray(w, dtype=self.grad.dtype))


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    oh = np.zeros((labels.shape[0], k) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(oh, labels[:, None].astype(np.intp), 1, axis=1)
    return oh


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")
    return labels


def _nll(probs: np.ndarray, labels: np.ndarray, weight: np.ndarray | None = None):
    """Mean of -log p[label]; grad w.r.t. probs.  ``weight`` masks voxels."""
    p = np.take_along_axis(probs, labels[:, None].astype(np.intp), axis=1)[:, 0]
    pc = np.maximum(p, EPS_LOG)
    denom = labels.size if weight is None else max(float(weight.sum()), 1.0)
    w = np.ones_like(pc) if weight is None else weight.astype(pc.dtype)
    value = float((-np.log(pc) * w).sum() / denom)
    gp = np.where(p > EPS_LOG, -w / (pc * denom), 0.0).astype(probs.dtype)
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, labels[:, None].astype(np.intp), gp[:, None], axis=1)
    return value, grad


def cross_entropy(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None) -> LossValue:
    labels = _check_labels(labels, probs.shape[1])
    return LossValue(*_nll(probs, labels, mask))


def soft_dice_loss(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None,
                   smooth: float = DICE_SMOOTH) -> LossValue:
    """1 - mean over channels of (2 sum pg + s) / (sum p + sum g + s), batch-wide."""
    k = probs.shape[1]
    labels = _check_labels(labels, k)
    g = _one_hot(labels, k, probs.dtype)
    p = probs
    if mask is not None:
        m = mask[:, None].astype(probs.dtype)
        p, g = p * m, g * m
    axes = (0, 2, 3, 4)
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes)
    num = 2 * inter + smooth
    den = denom + smooth
    dice = num / den
    value = float(1.0 - dice.mean())
    # d dice_c / d p = (2 g den - num) / den^2
    shape = (1, k, 1, 1, 1)
    grad = -(2 * g * den.reshape(shape) - num.reshape(shape)) / (den.reshape(shape) ** 2) / k
    if mask is not None:
        grad = grad * mask[:, None]
    return LossValue(value, grad.astype(probs.dtype))


def dice_ce_loss(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None) -> LossValue:
    """Soft Dice (all channels) plus voxel-mean cross-entropy."""
    return soft_dice_loss(probs, labels, mask) + cross_entropy(probs, labels, mask)


def _as_set(classes) -> set[int]:
    return {int(c) for c in (classes or ())}


def unce_loss(probs: np.ndarray, labels: np.ndarray, old_classes, overlap_classes=(),
              new_classes=None) -> LossValue:
    """Unbiased cross-entropy with overlap handling.

    Background probability becomes ``p_bg + sum(p_k for k in old - overlap)``
    before the log-likelihood; channel 0 is background and class ids are
    channel indices.
    """
    old, overlap = _as_set(old_classes) - {0}, _as_set(overlap_classes)
    if 0 in overlap or not overlap <= old:
        raise ValueError("overlap classes must be old foreground classes")
    if new_classes is not None and not overlap <= _as_set(new_classes):
        raise ValueError("overlap classes must also be current classes")
    labels = _check_labels(labels, probs.shape[1])
    merged_ids = sorted(old - overlap)
    if any(int(c) in merged_ids for c in np.unique(labels)):
        raise ValueError("labels contain merged old classes")
    if not merged_ids:
        return LossValue(*_nll(probs, labels))
    q = merge_into_background(probs, merged_ids)
    value, gq = _nll(q, labels)
    grad = gq.copy()
    grad[:, merged_ids] = gq[:, :1]
    return LossValue(value, grad)


def merge_into_background(probs: np.ndarray, merged_ids: Sequence[int]) -> np.ndarray:
    """Move the mass of ``merged_ids`` channels onto channel 0 (sum preserved)."""
    q = probs.copy()
    q[:, 0] = probs[:, 0] + probs[:, list(merged_ids)].sum(axis=1)
    q[:, list(merged_ids)] = 0
    return q


def unkd_loss(probs_new: np.ndarray, probs_old: np.ndarray, old_classes, new_classes,
              overlap_classes=(), weight: float = UNKD_WEIGHT) -> LossValue:
    """Unbiased distillation over old classes that are not re-learned now.

    ``probs_old`` has one channel per old class (channel 0 background);
    ``probs_new`` extends those channels with the current classes.  All new
    model mass on current classes (overlaps included) is merged into
    background, then ``-sum_c q_old(c) log q_new_merged(c)`` is averaged over
    voxels for c in ``({0} | old) - overlap``.
    """
    old, new, overlap = _as_set(old_classes) - {0}, _as_set(new_classes) - {0}, _as_set(overlap_classes)
    k_old, k_new = probs_old.shape[1], probs_new.shape[1]
    if not old <= set(range(1, k_old)) or not new <= set(range(1, k_new)):
        raise ValueError("class sets do not match model channels")
    if not overlap <= (old & new):
        raise ValueError("overlap classes must be in both old and new sets")
    if probs_new.shape[0] != probs_old.shape[0] or probs_new.shape[2:] != probs_old.shape[2:]:
        raise ValueError("old/new prediction shapes differ")
    kd_ids = [0] + sorted(old - overlap)
    merged_ids = sorted(new)
    if set(kd_ids) & set(merged_ids):
        raise ValueError("classes shared by old and new sets must be declared as overlap")
    q = merge_into_background(probs_new, merged_ids) if merged_ids else probs_new
    qs = q[:, kd_ids]
    qc = np.maximum(qs, EPS_LOG)
    t = probs_old[:, kd_ids]
    m = probs_new.shape[0] * int(np.prod(probs_new.shape[2:]))
    value = float(-(t * np.log(qc)).sum() / m)
    gs = np.where(qs > EPS_LOG, -t / (qc * m), 0.0).astype(probs_new.dtype)
    gq = np.zeros_like(probs_new)
    gq[:, kd_ids] = gs
    grad = gq
    if merged_ids:
        grad = gq.copy()
        grad[:, merged_ids] = gq[:, :1]
    return LossValue(value, grad).scaled(weight)


# -- local POD --------------------------------------------------------------

def _regions(extent: int, parts: int) -> list[slice]:
    edges = np.linspace(0, extent, parts + 1).round().astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def local_pod_3d(features: np.ndarray, scales=(1, 2), one_d: bool = False) -> np.ndarray:
    """Multi-scale pooled projections, one descriptor row per sample.

    At scale ``s`` the volume is cut into ``s**3`` regular sub-regions; each
    region contributes its means along depth (H*W values), height (D*W) and
    width (D*H) per channel.  ``one_d`` switches to the rejected variant that
    pools two axes at a time and keeps 1D profiles.
    """
    if features.ndim != 5:
        raise ValueError("local POD expects (N, C, D, H, W)")
    n = features.shape[0]
    parts = []
    for s in scales:
        for sd in _regions(features.shape[2], s):
            for sh in _regions(features.shape[3], s):
                for sw in _regions(features.shape[4], s):
                    r = features[:, :, sd, sh, sw]
                    if one_d:
                        views = (r.mean(axis=(3, 4)), r.mean(axis=(2, 4)), r.mean(axis=(2, 3)))
                    else:
                        views = (r.mean(axis=2), r.mean(axis=3), r.mean(axis=4))
                    parts.extend(v.reshape(n, -1) for v in views)
    return np.concatenate(parts, axis=1)


def local_pod_backward(grad_desc: np.ndarray, shape, scales=(1, 2), one_d: bool = False) -> np.ndarray:
    """Adjoint of :func:`local_pod_3d` (it is linear in the features)."""
    n, c = shape[:2]
    out = np.zeros(shape, dtype=grad_desc.dtype)
    pos = 0
    for s in scales:
        for sd in _regions(shape[2], s):
            for sh in _regions(shape[3], s):
                for sw in _regions(shape[4], s):
                    rd, rh, rw = sd.stop - sd.start, sh.stop - sh.start, sw.stop - sw.start
                    region = out[:, :, sd, sh, sw]
                    if one_d:
                        g = grad_desc[:, pos:pos + c * rd].reshape(n, c, rd, 1, 1)
                        pos += c * rd
                        region += g / (rh * rw)
                        g = grad_desc[:, pos:pos + c * rh].reshape(n, c, 1, rh, 1)
                        pos += c * rh
                        region += g / (rd * rw)
                        g = grad_desc[:, pos:pos + c * rw].reshape(n, c, 1, 1, rw)
                        pos += c * rw
                        region += g / (rd * rh)
                    else:
                        g = grad_desc[:, pos:pos + c * rh * rw].reshape(n, c, 1, rh, rw)
                        pos += c * rh * rw
                        region += g / rd
                        g = grad_desc[:, pos:pos + c * rd * rw].reshape(n, c, rd, 1, rw)
                        pos += c * rd * rw
                        region += g / rh
                        g = grad_desc[:, pos:pos + c * rd * rh].reshape(n, c, rd, rh, 1)
                        pos += c * rd * rh
                        region += g / rw
    return out


def pod_distill_loss(feats_new: Sequence[np.ndarray], feats_old: Sequence[np.ndarray], scales=(1, 2),
                     factor: float = POD_FACTOR, one_d: bool = False) -> tuple[float, list[np.ndarray]]:
    """``factor`` * mean over layers and samples of ||POD(new) - POD(old)||_2.

    Returns the value and one gradient array per new feature map.
    """
    value, grads = 0.0, []
    for fn, fo in zip(feats_new, feats_old):
        dn = local_pod_3d(fn, scales, one_d)
        do = local_pod_3d(fo, scales, one_d)
        diff = dn - do
        norms = np.sqrt((diff ** 2).sum(axis=1))
        n = fn.shape[0]
        value += float(norms.mean())
        gdesc = diff / np.maximum(norms, 1e-12)[:, None] / n
        grads.append(local_pod_backward(gdesc.astype(fn.dtype), fn.shape, scales, one_d))
    layers = max(len(grads), 1)
    return factor * value / layers, [g * (factor / layers) for g in grads]
