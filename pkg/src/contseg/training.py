"""Decoder training and evaluation on cached frozen-encoder features."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .losses import dice_ce_loss
from .metrics import dice
from .nn import SGD, poly_lr
from .segnet import Decoder, Encoder, as_batch

log = logging.getLogger(__name__)

BATCH_SIZE = 2
LR = 0.1
MOMENTUM = 0.9


def label_lut(class_ids: Sequence[int], n_global: int) -> np.ndarray:
    """Global id -> decoder channel; ids outside ``class_ids`` map to background."""
    lut = np.zeros(n_global + 1, dtype=np.int16)
    for ch, c in enumerate(class_ids, start=1):
        lut[c] = ch
    return lut


@dataclass
class FeatureSet:
    """Encoder features (per level) and channel-space labels for a list of samples."""
    feats: list[list[np.ndarray]]
    labels: list[np.ndarray]

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> tuple[list[np.ndarray], np.ndarray]:
        levels = len(self.feats[0])
        return ([np.stack([self.feats[i][l] for i in idx]) for l in range(levels)],
                np.stack([self.labels[i] for i in idx]))

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet([self.feats[i] for i in idx], [self.labels[i] for i in idx])


def encode(encoder: Encoder, images: Sequence[np.ndarray]) -> list[list[np.ndarray]]:
    out = []
    for img in images:
        f = encoder.forward(as_batch(img), train=False)
        out.append([a[0] for a in f])
    return out


def feature_set(encoder: Encoder, dataset, class_ids: Sequence[int]) -> FeatureSet:
    lut = label_lut(class_ids, max(max(class_ids), int(max(s.label.max() for s in dataset.samples))))
    return FeatureSet(encode(encoder, [s.image for s in dataset.samples]),
                      [lut[s.label.astype(np.intp)] for s in dataset.samples])


def epoch_batches(n: int, rng, batch_size: int = BATCH_SIZE) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_decoder(decoder: Decoder, data: FeatureSet, epochs: int, seed, lr: float = LR,
                  momentum: float = MOMENTUM, batch_size: int = BATCH_SIZE, loss_fn=dice_ce_loss,
                  on_batch=None) -> list[float]:
    """SGD with poly decay; returns the mean loss per epoch.

    ``on_batch(step)`` runs before every network step (used to interleave
    architecture updates).
    """
    rng = np.random.default_rng(seed)
    opt = SGD(decoder, lr=lr, momentum=momentum)
    history = []
    step = 0
    for epoch in range(epochs):
        opt.lr = poly_lr(lr, epoch, epochs)
        losses = []
        for idx in epoch_batches(len(data), rng, batch_size):
            if on_batch is not None:
                on_batch(step)
            feats, labels = data.batch(idx)
            probs = decoder.forward(feats, train=True)
            loss = loss_fn(probs, labels)
            opt.zero_grad()
            decoder.backward(loss.grad)
            opt.step()
            losses.append(loss.value)
            step += 1
        history.append(float(np.mean(losses)))
    return history


def predict(decoder: Decoder, data: FeatureSet, batch_size: int = 4) -> list[np.ndarray]:
    """Eval-mode probabilities, one (K+1, D, H, W) array per sample."""
    out = []
    for i in range(0, len(data), batch_size):
        feats, _ = data.batch(range(i, min(i + batch_size, len(data))))
        out.extend(decoder.forward(feats, train=False))
    return out


def mean_foreground_dice(preds: Sequence[np.ndarray], labels: Sequence[np.ndarray], n_classes: int) -> float:
    """Mean over classes 1..n of the per-class DSC averaged over samples."""
    per_class = [np.mean([dice(p == c, g == c) for p, g in zip(preds, labels)]) for c in range(1, n_classes + 1)]
    return float(np.mean(per_class))


def evaluate_decoder(decoder: Decoder, data: FeatureSet) -> float:
    preds = [p.argmax(axis=0) for p in predict(decoder, data)]
    return mean_foreground_dice(preds, data.labels, decoder.n_classes)
