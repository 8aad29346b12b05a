"""Per-task decoder optimization: kernel search and distillation pruning.

The search relaxes the per-block kernel choice into a softmax-weighted sum of
four parallel branches, one per kernel kind.  Pruning replaces decoding
blocks by 1x1x1 projection students trained to mimic them, enumerates every
replacement mask and keeps the smallest path within a relative DSC tolerance.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import dice_ce_loss
from .nn import SGD, KERNEL_KINDS, KernelKind, Layer, Module, poly_lr, softmax
from .nn.tensor import check_finite
from .phantom import split_counts
from .segnet import ConvBlock, Decoder, build_decoder
from .training import LR, MOMENTUM, FeatureSet, epoch_batches, evaluate_decoder, train_decoder

log = logging.getLogger(__name__)

WARMUP_FRACTION = 0.4
NAS_SPLIT = (0.6, 0.3, 0.1)
RETRAIN_SPLIT = (0.8, 0.2)
FINETUNE_LR_FACTOR = 0.1
FINETUNE_LR = LR * FINETUNE_LR_FACTOR
DEFAULT_TAU = 0.01


def sub_seed(seed, *keys) -> list[int]:
    """Seed material extended by integer keys; ``seed`` may be an int or a list."""
    base = [int(s) for s in np.atleast_1d(seed)]
    return base + [int(k) for k in keys]


# -- relaxed search ---------------------------------------------------------

class ArchWeights(Module):
    """Per-block logits over the four kernel kinds (order of ``KERNEL_KINDS``)."""

    def __init__(self, n_blocks: int):
        super().__init__()
        # zero logits == uniform 1/4 mixing
        self.params["logits"] = np.zeros((n_blocks, len(KERNEL_KINDS)), dtype=np.float64)

    def probs(self) -> np.ndarray:
        return softmax(self.params["logits"], axis=1)

    def assignment(self) -> list[KernelKind]:
        return [KERNEL_KINDS[i] for i in np.argmax(self.probs(), axis=1)]

    def accumulate(self, weight_grads: np.ndarray) -> None:
        """Chain dL/dw (per block, per kind) through the row softmax."""
        w = self.probs()
        g = w * (weight_grads - (w * weight_grads).sum(axis=1, keepdims=True))
        self.set_grad("logits", g)


def mixed_block_forward(candidates: Sequence, arch_logits: np.ndarray, x: np.ndarray, train: bool = False):
    """``sum_k softmax(arch_logits)_k * candidates[k](x)``."""
    w = softmax(np.asarray(arch_logits, dtype=np.float64), axis=0)
    out = None
    for wk, cand in zip(w, candidates):
        y = cand.forward(x, train) * x.dtype.type(wk)
        out = y if out is None else out + y
    return out


class MixedBlock(Layer):
    """Four independent kernel-kind branches mixed by externally supplied weights."""

    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.branches = [ConvBlock(k, cin, cout, rng=rng) for k in KERNEL_KINDS]
        self.weights = np.full(len(KERNEL_KINDS), 1.0 / len(KERNEL_KINDS))
        self.weight_grad = None

    def forward(self, x, train=True):
        outs = [b.forward(x, train) for b in self.branches]
        if train:
            self._cache = outs
        out = None
        for wk, y in zip(self.weights, outs):
            y = y * x.dtype.type(wk)
            out = y if out is None else out + y
        return out

    def backward(self, grad):
        outs = self._pop_cache()
        self.weight_grad = np.array([float((grad * y).sum()) for y in outs])
        gin = None
        for wk, b in zip(self.weights, self.branches):
            g = b.backward(grad * grad.dtype.type(wk))
            gin = g if gin is None else gin + g
        return gin


def build_search_decoder(widths, n_classes: int, seed=0) -> Decoder:
    rng = np.random.default_rng(seed)
    blocks = []
    for i in range(len(widths) - 1):
        level = len(widths) - 2 - i
        blocks.append(MixedBlock(widths[level + 1] + widths[level], widths[level], rng=rng))
    return Decoder(widths, n_classes, blocks, rng=rng)


@dataclass
class NASResult:
    assignment: list[KernelKind]
    arch_logits: np.ndarray
    warmup_logits: np.ndarray
    history: list[float] = field(default_factory=list)


def nas_splits(n: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    counts = split_counts(n, NAS_SPLIT)
    if min(counts) < 1:
        raise ValueError(f"{n} samples are too few for a search split")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])


def nas_search(data: FeatureSet, widths, n_classes: int, epochs: int, seed=0, arch_lr: float = 0.5,
               arch_momentum: float = 0.9, lr: float = LR, momentum: float = MOMENTUM) -> NASResult:
    """Warm up with uniform mixing, then alternate architecture and network updates.

    Architecture steps use batches of the search split, network steps batches
    of the training split.  Returns the per-block argmax assignment.
    """
    if epochs < 1:
        raise ValueError("search needs at least one epoch")
    train_idx, nas_idx, _ = nas_splits(len(data), seed)
    train, nas = data.subset(train_idx), data.subset(nas_idx)
    decoder = build_search_decoder(widths, n_classes, seed)
    arch = ArchWeights(len(decoder.blocks))
    arch_opt = SGD(arch, lr=arch_lr, momentum=arch_momentum, nesterov=False)
    rng = np.random.default_rng(sub_seed(seed, 1))
    warmup = int(round(WARMUP_FRACTION * epochs))

    def set_weights():
        for row, block in zip(arch.probs(), decoder.blocks):
            block.weights = row

    set_weights()
    history = (train_decoder(decoder, train, warmup, seed=sub_seed(seed, 2), lr=lr, momentum=momentum)
               if warmup else [])
    warmup_logits = arch.params["logits"].copy()
    nas_batches: list[np.ndarray] = []

    def arch_step(step):
        if not nas_batches:
            nas_batches.extend(epoch_batches(len(nas), rng))
        feats, labels = nas.batch(nas_batches.pop())
        probs = decoder.forward(feats, train=True)
        loss = dice_ce_loss(probs, labels)
        decoder.backward(loss.grad)
        decoder_zero_grads(decoder)
        arch_opt.zero_grad()
        arch.accumulate(np.stack([b.weight_grad for b in decoder.blocks]))
        arch_opt.step()
        set_weights()

    if epochs - warmup:
        history += train_decoder(decoder, train, epochs - warmup, seed=sub_seed(seed, 3), lr=lr, momentum=momentum,
                                 on_batch=arch_step)
    check_finite(arch.params["logits"], "architecture logits")
    return NASResult(arch.assignment(), arch.params["logits"].copy(), warmup_logits, history)


def decoder_zero_grads(decoder: Module) -> None:
    for m in decoder.modules():
        m.grads = {}


# -- distillation -----------------------------------------------------------

def teacher_preactivation(block: ConvBlock, x: np.ndarray) -> np.ndarray:
    """Teacher output before its final ReLU (eval mode)."""
    for layer in block.body.layers[:-1]:
        x = layer.forward(x, train=False)
    return x


def _lstsq_init(student: ConvBlock, inputs: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> None:
    """Fit the 1x1x1 conv so that conv + (identity-initialized) norm matches ``targets``."""
    cin = inputs[0].shape[1]
    X = np.concatenate([np.moveaxis(x, 1, -1).reshape(-1, cin) for x in inputs]).astype(np.float64)
    Y = np.concatenate([np.moveaxis(t, 1, -1).reshape(-1, t.shape[1]) for t in targets]).astype(np.float64)
    X1 = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    sol, *_ = np.linalg.lstsq(X1, Y, rcond=None)
    norm = student.norm
    scale = np.sqrt(norm.buffers["running_var"].astype(np.float64) + norm.eps)
    conv = student.convs[0]
    w = (sol[:-1].T * scale[:, None]).reshape(conv.params["weight"].shape)
    conv.params["weight"] = w.astype(conv.params["weight"].dtype)
    conv.params["bias"] = (sol[-1] * scale + norm.buffers["running_mean"]).astype(conv.params["bias"].dtype)


def distill_block(teacher: ConvBlock, inputs: Sequence[np.ndarray], epochs: int, seed=0,
                  lr: float = 0.01, momentum: float = 0.9) -> tuple[ConvBlock, float]:
    """Projection student matching ``teacher`` on identical ``inputs`` (MSE).

    The teacher is only run forward; its parameters are never touched.
    The student's norm stays on running statistics, i.e. a fixed affine map.
    Returns the frozen student and its final MSE.
    """
    rng = np.random.default_rng(seed)
    cin, cout = teacher.spec.in_channels, teacher.spec.out_channels
    student = ConvBlock(KernelKind.PROJECTION, cin, cout, rng=rng)
    student.norm.use_running = True
    targets = [teacher.forward(x, train=False) for x in inputs]
    _lstsq_init(student, inputs, [teacher_preactivation(teacher, x) for x in inputs])
    opt = SGD(student, lr=lr, momentum=momentum, nesterov=True)
    for epoch in range(epochs):
        opt.lr = poly_lr(lr, epoch, epochs)
        for i in rng.permutation(len(inputs)):
            out = student.forward(inputs[i], train=True)
            diff = out - targets[i]
            opt.zero_grad()
            student.backward((2.0 / diff.size) * diff)
            opt.step()
    mse = float(np.mean([np.mean((student.forward(x, train=False) - t) ** 2) for x, t in zip(inputs, targets)]))
    return student.freeze(), mse


def block_inputs(decoder: Decoder, data: FeatureSet, batch_size: int = 4) -> list[list[np.ndarray]]:
    """Teacher-path inputs of every decoding block, batched: result[block][batch]."""
    out = [[] for _ in decoder.blocks]
    for i in range(0, len(data), batch_size):
        feats, _ = data.batch(range(i, min(i + batch_size, len(data))))
        _, inputs = decoder.forward(feats, train=False, return_block_inputs=True)
        for b, x in enumerate(inputs):
            out[b].append(x)
    return out


def distill_students(decoder: Decoder, data: FeatureSet, epochs: int, seed=0) -> tuple[list[ConvBlock], list[float]]:
    """One student per block, deepest block first; each is frozen once trained."""
    streams = block_inputs(decoder, data)
    students, errors = [], []
    for b, block in enumerate(decoder.blocks):
        s, e = distill_block(block, streams[b], epochs, seed=sub_seed(seed, b))
        students.append(s)
        errors.append(e)
    return students, errors


# -- path enumeration and selection ----------------------------------------

@dataclass
class PruneCandidate:
    mask: int
    dsc: float
    params: int


@dataclass
class PruneReport:
    baseline: float
    tau: float
    selected: int
    candidates: list[PruneCandidate]
    n_blocks: int
    no_prune: bool = False

    @property
    def threshold(self) -> float:
        return (1.0 - self.tau) * self.baseline

    def feasible(self, c: PruneCandidate) -> bool:
        return c.dsc >= self.threshold

    def selected_candidate(self) -> PruneCandidate:
        return next(c for c in self.candidates if c.mask == self.selected)

    def mask_str(self, mask: int) -> str:
        return format(mask, f"0{self.n_blocks}b")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mask", "dsc", "params", "feasible", "selected"])
            for c in self.candidates:
                w.writerow([self.mask_str(c.mask), repr(c.dsc), c.params, int(self.feasible(c)),
                            int(c.mask == self.selected)])


def apply_mask(decoder: Decoder, students: Sequence[ConvBlock], mask: int) -> Decoder:
    """Shallow copy of ``decoder`` with block ``i`` swapped for ``students[i]`` where bit ``i`` is set."""
    if len(students) != len(decoder.blocks):
        raise ValueError("need exactly one student per block")
    out = copy.copy(decoder)
    out.blocks = [students[i] if mask >> i & 1 else b for i, b in enumerate(decoder.blocks)]
    return out


def enumerate_paths(decoder: Decoder, students: Sequence[ConvBlock], val: FeatureSet) -> list[PruneCandidate]:
    """Evaluate all ``2**B`` replacement masks once, in mask order."""
    if len(students) != len(decoder.blocks):
        raise ValueError("need exactly one student per block")
    out = []
    for mask in range(2 ** len(decoder.blocks)):
        d = apply_mask(decoder, students, mask)
        out.append(PruneCandidate(mask, evaluate_decoder(d, val), d.param_count()))
    return out


def select_pruned_path(candidates: Sequence[PruneCandidate], baseline: float, tau: float = DEFAULT_TAU,
                       n_blocks: int | None = None) -> PruneReport:
    """Smallest feasible path; ties by higher DSC, then lower mask.  Falls back to mask 0."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    n_blocks = n_blocks if n_blocks is not None else max(int(len(candidates) - 1).bit_length(), 1)
    report = PruneReport(baseline, tau, 0, list(candidates), n_blocks)
    feasible = [c for c in candidates if report.feasible(c)]
    if not feasible:
        report.no_prune = True
        return report
    best = min(feasible, key=lambda c: (c.params, -c.dsc, c.mask))
    report.selected = best.mask
    return report


def prune_decoder(decoder: Decoder, students: Sequence[ConvBlock], report: PruneReport) -> Decoder:
    """Standalone trimmed decoder (deep copies) ready for fine-tuning."""
    trimmed = copy.deepcopy(apply_mask(decoder, students, report.selected))
    return trimmed.unfreeze()


def finetune(decoder: Decoder, data: FeatureSet, epochs: int, seed=0, lr: float = FINETUNE_LR,
             momentum: float = MOMENTUM) -> list[float]:
    return train_decoder(decoder, data, epochs, seed=seed, lr=lr, momentum=momentum) if epochs else []


def retrain_split(n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    counts = split_counts(n, RETRAIN_SPLIT)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:counts[0]]), np.sort(perm[counts[0]:])


def build_searched_decoder(widths, n_classes: int, assignment, seed=0) -> Decoder:
    return build_decoder(widths, n_classes, assignment, seed=seed)
