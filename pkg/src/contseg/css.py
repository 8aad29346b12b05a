"""Continual protocol: base training, frozen-encoder steps, baselines and state I/O.

Every step receives exactly one dataset.  The encoder (and the auxiliary
heads) are trained on the first dataset only and frozen afterwards; each
later dataset gets its own decoder, searched, trained, pruned and then never
touched again.
"""
from __future__ import annotations

import copy
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import decoder_opt as dopt
from .losses import dice_ce_loss, pod_distill_loss, unce_loss, unkd_loss
from .merge import (
    BodyPartDistribution,
    anomaly_diameter,
    build_context,
    dataset_distribution,
    merge_predictions,
)
from .metrics import MetricRow, class_metrics, forgetting_rate, read_metrics_csv, write_metrics_csv
from .nn import SGD, KernelKind, poly_lr
from .phantom import PhantomDataset, augment, split_dataset
from .segnet import (
    DEFAULT_WIDTHS,
    AuxHeads,
    Decoder,
    Encoder,
    as_batch,
    attach_aux_heads,
    build_decoder,
    build_encoder,
    load_network,
    network_checksum,
    save_network,
)
from .training import (
    BATCH_SIZE,
    LR,
    MOMENTUM,
    FeatureSet,
    encode,
    epoch_batches,
    evaluate_decoder,
    label_lut,
    train_decoder,
)

log = logging.getLogger(__name__)

ORDERS = {
    "A": ("total", "chest", "hn", "eso"),
    "B": ("total", "hn", "chest", "eso"),
}
AUX_WEIGHT = 0.5
TEST_FRACTION = 0.2
BASELINE_MODES = ("finetune", "mib", "plop", "ilt")
STATE_VERSION = 1


class StageError(RuntimeError):
    """A pipeline stage was requested before its prerequisites exist."""


@dataclass
class ContinualPlan:
    order: tuple[str, ...] = ORDERS["A"]
    base_epochs: int = 40
    step_epochs: int = 30
    nas_epochs: int = 10
    distill_epochs: int = 5
    finetune_epochs: int = 5
    seed: int = 0
    tau: float = dopt.DEFAULT_TAU
    baseline: str | None = None
    prune: bool = True
    nas: bool = True
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    lr: float = LR
    momentum: float = MOMENTUM

    def __post_init__(self):
        self.order = tuple(self.order)
        self.widths = tuple(self.widths)
        if len(set(self.order)) != len(self.order):
            raise ValueError("dataset ids in a plan must be unique")
        if not self.order:
            raise ValueError("plan needs at least one dataset")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.baseline is not None and self.baseline not in BASELINE_MODES:
            raise ValueError(f"unknown baseline mode {self.baseline!r}")
        for name in ("base_epochs", "step_epochs", "nas_epochs", "distill_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["order"], d["widths"] = list(self.order), list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ContinualPlan":
        return cls(**d)


def derived_seed(seed: int, *keys) -> list[int]:
    """Seed material from the global seed and names; independent of step order."""
    return [int(seed)] + [zlib.crc32(str(k).encode()) for k in keys]


def train_test_split(dataset: PhantomDataset, seed: int) -> tuple[PhantomDataset, PhantomDataset]:
    return split_dataset(dataset, (1 - TEST_FRACTION, TEST_FRACTION), derived_seed(seed, dataset.name, "split"),
                         names=["trainval", "test"])


@dataclass
class TaskState:
    task: str
    step: int
    class_ids: tuple[int, ...]
    decoder: Decoder
    assignment: tuple[str, ...] = ()
    prune_mask: int = 0
    distribution: BodyPartDistribution | None = None
    snapshot: tuple[MetricRow, ...] = ()
    prune_report: dopt.PruneReport | None = None
    history: list[float] = field(default_factory=list)

    def meta(self) -> dict:
        return {"task": self.task, "step": self.step, "class_ids": list(self.class_ids),
                "assignment": list(self.assignment), "prune_mask": self.prune_mask,
                "distribution": self.distribution.to_dict() if self.distribution else None,
                "history": list(self.history)}


# -- evaluation -------------------------------------------------------------

def segment(encoder: Encoder, decoder: Decoder, images: Sequence[np.ndarray], batch_size: int = 4) -> list[np.ndarray]:
    out = []
    for i in range(0, len(images), batch_size):
        x = np.stack([as_batch(im)[0] for im in images[i:i + batch_size]])
        out.extend(decoder.forward(encoder.forward(x, train=False), train=False))
    return out


def to_global(probs: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    lut = np.asarray([0] + list(class_ids), dtype=np.int16)
    return lut[probs.argmax(axis=0)]


def snapshot_metrics(encoder: Encoder, decoder: Decoder, class_ids, test: PhantomDataset, step: int,
                     task: str) -> list[MetricRow]:
    preds = [to_global(p, class_ids) for p in segment(encoder, decoder, [s.image for s in test.samples])]
    return class_metrics(preds, [s.label for s in test.samples], class_ids, test.spacing, step, task)


# -- base step --------------------------------------------------------------

def _aux_losses(aux: AuxHeads, feats, bodypart, anomaly):
    bp_probs, an_probs = aux.forward(feats)
    inside = bodypart > 0
    lbp = dice_ce_loss(bp_probs, np.maximum(bodypart.astype(np.intp) - 1, 0), mask=inside).scaled(AUX_WEIGHT)
    lan = dice_ce_loss(an_probs, anomaly.astype(np.intp)).scaled(AUX_WEIGHT)
    return lbp, lan


def _add_grads(*grad_lists):
    out = []
    for gs in zip(*grad_lists):
        present = [g for g in gs if g is not None]
        out.append(sum(present[1:], present[0]) if present else None)
    return out


def train_base(dataset: PhantomDataset, plan: ContinualPlan):
    """Jointly train encoder, first decoder and auxiliary heads, then freeze encoder and heads.

    Returns ``(encoder, task_state, aux_heads)``.
    """
    _require_single(dataset)
    trainval, test = train_test_split(dataset, plan.seed)
    class_ids = tuple(sorted(dataset.labeled))
    seed = derived_seed(plan.seed, "base")
    encoder = build_encoder(plan.widths, seed=seed + [1])
    decoder = build_decoder(encoder, len(class_ids), [KernelKind.CONV3D] * (len(plan.widths) - 1), seed=seed + [2])
    n_bp = dataset.spec.n_bodyparts if dataset.spec is not None else 4
    aux = attach_aux_heads(encoder, n_bp, seed=seed + [3])
    lut = label_lut(class_ids, int(max(max(class_ids), max(int(s.label.max()) for s in dataset.samples))))
    opt = SGD([encoder, decoder, aux], lr=plan.lr, momentum=plan.momentum)
    rng = np.random.default_rng(seed + [4])
    history = []
    for epoch in range(plan.base_epochs):
        opt.lr = poly_lr(plan.lr, epoch, plan.base_epochs)
        losses = []
        for idx in epoch_batches(len(trainval), rng, BATCH_SIZE):
            batch = [augment(trainval.samples[i], seed + [5, epoch, int(i)]) for i in idx]
            x = np.stack([s.image for s in batch])[:, None]
            labels = lut[np.stack([s.label for s in batch]).astype(np.intp)]
            feats = encoder.forward(x, train=True)
            loss = dice_ce_loss(decoder.forward(feats, train=True), labels)
            lbp, lan = _aux_losses(aux, feats, np.stack([s.bodypart for s in batch]),
                                   np.stack([s.anomaly for s in batch]))
            opt.zero_grad()
            grads = _add_grads(decoder.backward(loss.grad), aux.bodypart.backward(lbp.grad),
                               aux.anomaly.backward(lan.grad))
            encoder.backward(grads)
            opt.step()
            losses.append(loss.value + lbp.value + lan.value)
        history.append(float(np.mean(losses)))
        log.info("base epoch %d loss %.4f", epoch, history[-1])
    encoder.freeze()
    aux.freeze()
    decoder.freeze()
    snapshot = snapshot_metrics(encoder, decoder, class_ids, test, 1, dataset.name)
    state = TaskState(dataset.name, 1, class_ids, decoder, tuple(k.value for k in decoder.kinds), 0,
                      dataset_distribution(trainval), tuple(snapshot), None, history)
    return encoder, state, aux


def anomaly_sigma(dataset: PhantomDataset) -> float:
    """Smoothing width for the anomaly map: half the mean anomaly diameter."""
    return anomaly_diameter([s.anomaly for s in dataset.samples]) / 2.0


# -- continual step ---------------------------------------------------------

def _require_single(dataset) -> None:
    if not isinstance(dataset, PhantomDataset):
        raise TypeError("a step accepts exactly one dataset")


def continual_step(encoder: Encoder, dataset: PhantomDataset, plan: ContinualPlan, step: int) -> TaskState:
    """Search, train, prune and snapshot a new decoder for ``dataset`` on the frozen encoder."""
    _require_single(dataset)
    if not encoder.frozen:
        raise StageError("the encoder must be frozen before continual steps")
    trainval, test = train_test_split(dataset, plan.seed)
    class_ids = tuple(sorted(dataset.labeled))
    seed = derived_seed(plan.seed, dataset.name)
    lut_max = int(max(max(class_ids), max(int(s.label.max()) for s in dataset.samples)))
    lut = label_lut(class_ids, lut_max)
    data = FeatureSet(encode(encoder, [s.image for s in trainval.samples]),
                      [lut[s.label.astype(np.intp)] for s in trainval.samples])
    n = len(class_ids)
    kinds = [KernelKind.CONV3D] * (len(plan.widths) - 1)
    if plan.nas and plan.nas_epochs:
        kinds = dopt.nas_search(data, plan.widths, n, plan.nas_epochs, seed=seed + [1], lr=plan.lr,
                                momentum=plan.momentum).assignment
    train_idx, val_idx = dopt.retrain_split(len(data), seed + [2])
    train, val = data.subset(train_idx), data.subset(val_idx)
    decoder = build_decoder(plan.widths, n, kinds, seed=seed + [3])
    history = train_decoder(decoder, train, plan.step_epochs, seed=seed + [4], lr=plan.lr, momentum=plan.momentum)
    report = None
    if plan.prune:
        students, _ = dopt.distill_students(decoder, train, plan.distill_epochs, seed=seed + [5])
        candidates = dopt.enumerate_paths(decoder, students, val)
        report = dopt.select_pruned_path(candidates, candidates[0].dsc, plan.tau, len(decoder.blocks))
        if report.selected:
            decoder = dopt.prune_decoder(decoder, students, report)
            history += dopt.finetune(decoder, train, plan.finetune_epochs, seed=seed + [6],
                                     lr=plan.lr * dopt.FINETUNE_LR_FACTOR, momentum=plan.momentum)
    decoder.freeze()
    snapshot = snapshot_metrics(encoder, decoder, class_ids, test, step, dataset.name)
    return TaskState(dataset.name, step, class_ids, decoder, tuple(KernelKind.parse(k).value for k in kinds),
                     report.selected if report else 0, dataset_distribution(trainval), tuple(snapshot),
                     report, history)


# -- framework state --------------------------------------------------------

@dataclass
class FrameworkState:
    plan: ContinualPlan
    encoder: Encoder
    aux: AuxHeads | None = None
    tasks: list[TaskState] = field(default_factory=list)
    anomaly_sigma: float = 0.0

    @property
    def task_names(self) -> list[str]:
        return [t.task for t in self.tasks]

    def checksums(self) -> dict[str, str]:
        out = {"encoder": network_checksum(self.encoder)}
        for t in self.tasks:
            out[t.task] = network_checksum(t.decoder)
        return out


def run_plan(datasets: dict[str, PhantomDataset], plan: ContinualPlan, base: FrameworkState | None = None,
             on_step=None) -> FrameworkState:
    """Run all steps of ``plan``; a prepared ``base`` state skips the first step."""
    if base is None:
        encoder, first, aux = train_base(datasets[plan.order[0]], plan)
        fs = FrameworkState(plan, encoder, aux, [first], anomaly_sigma(datasets[plan.order[0]]))
    else:
        if base.task_names != [plan.order[0]]:
            raise StageError("base state does not match the plan's first dataset")
        fs = FrameworkState(plan, base.encoder, base.aux, list(base.tasks), base.anomaly_sigma)
    if on_step:
        on_step(fs)
    for t, name in enumerate(plan.order[1:], start=2):
        fs.tasks.append(continual_step(fs.encoder, datasets[name], plan, t))
        if on_step:
            on_step(fs)
    return fs


def save_state(root: str | Path, fs: FrameworkState) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_network(root / "encoder.ckpt", fs.encoder)
    if fs.aux is not None:
        save_network(root / "aux.ckpt", fs.aux, {"anomaly_sigma": fs.anomaly_sigma})
    for t, task in enumerate(fs.tasks, start=1):
        d = root / f"task_{t}"
        d.mkdir(exist_ok=True)
        save_network(d / "decoder.ckpt", task.decoder, task.meta())
        write_metrics_csv(d / "snapshot.csv", task.snapshot)
        if task.prune_report is not None:
            task.prune_report.write_csv(d / "prune.csv")
    manifest = {"version": STATE_VERSION, "plan": fs.plan.to_dict(), "tasks": fs.task_names}
    (root / "state.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_state(root: str | Path, plan: ContinualPlan | None = None) -> FrameworkState:
    """Load whatever exists; an encoder-only directory is a valid partial state."""
    root = Path(root)
    if not (root / "encoder.ckpt").exists():
        raise StageError(f"{root}: no encoder checkpoint")
    manifest = json.loads((root / "state.json").read_text()) if (root / "state.json").exists() else {}
    if manifest and manifest.get("version") != STATE_VERSION:
        raise ValueError(f"{root}: unsupported state version {manifest.get('version')}")
    if plan is None:
        plan = ContinualPlan.from_dict(manifest["plan"]) if manifest else ContinualPlan()
    encoder, _ = load_network(root / "encoder.ckpt")
    aux, sigma = None, 0.0
    if (root / "aux.ckpt").exists():
        aux, extra = load_network(root / "aux.ckpt")
        sigma = float(extra.get("anomaly_sigma", 0.0))
    tasks = []
    t = 1
    while (root / f"task_{t}" / "decoder.ckpt").exists():
        d = root / f"task_{t}"
        decoder, meta = load_network(d / "decoder.ckpt")
        dist = BodyPartDistribution.from_dict(meta["distribution"]) if meta.get("distribution") else None
        tasks.append(TaskState(meta["task"], meta["step"], tuple(meta["class_ids"]), decoder,
                               tuple(meta["assignment"]), meta["prune_mask"], dist,
                               tuple(read_metrics_csv(d / "snapshot.csv")), None, meta.get("history", [])))
        t += 1
    return FrameworkState(plan, encoder, aux, tasks, sigma)


# -- evaluation tables ------------------------------------------------------

def evaluate_steps(fs: FrameworkState, datasets: dict[str, PhantomDataset]) -> list[MetricRow]:
    """Per-class metrics of every learned task after every step, with forgetting vs. its snapshot."""
    rows = []
    tests = {t.task: train_test_split(datasets[t.task], fs.plan.seed)[1] for t in fs.tasks}
    for step in range(1, len(fs.tasks) + 1):
        for task in fs.tasks[:step]:
            current = snapshot_metrics(fs.encoder, task.decoder, task.class_ids, tests[task.task], step, task.task)
            snap = {r.cls: r for r in task.snapshot}
            for r in current:
                s = snap[r.cls].dsc
                r.forget_pct = forgetting_rate(s, r.dsc) if s > 0 else None
            rows.extend(current)
    return rows


@dataclass
class ForgettingEntry:
    step: int
    task: str
    dsc: float
    snapshot_dsc: float
    forget_pct: float


def forgetting_table(rows: Sequence[MetricRow], snapshots: dict[str, Sequence[MetricRow]]) -> list[ForgettingEntry]:
    """Per (step, task): mean DSC over classes and the relative drop from the task's snapshot."""
    out = []
    keys = sorted({(r.step, r.task) for r in rows}, key=lambda k: (k[0], list(snapshots).index(k[1])))
    for step, task in keys:
        dsc = float(np.mean([r.dsc for r in rows if r.step == step and r.task == task]))
        snap = float(np.mean([r.dsc for r in snapshots[task]]))
        out.append(ForgettingEntry(step, task, dsc, snap, forgetting_rate(snap, dsc) if snap > 0 else 0.0))
    return out


def write_forgetting_table(path: str | Path, entries: Sequence[ForgettingEntry]) -> None:
    with open(path, "w") as fh:
        fh.write("step,task,mean_dsc_pct,snapshot_dsc_pct,forget_pct\n")
        for e in entries:
            fh.write(f"{e.step},{e.task},{100 * e.dsc:.2f},{100 * e.snapshot_dsc:.2f},{e.forget_pct:.2f}\n")


def merge_volume(fs: FrameworkState, image: np.ndarray, tasks: Sequence[TaskState] | None = None,
                 draft: bool = False, bodypart: np.ndarray | None = None):
    """Merged global label map for one volume plus the per-voxel winning task index."""
    tasks = list(fs.tasks if tasks is None else tasks)
    if not tasks:
        raise StageError("no trained tasks to merge")
    feats = fs.encoder.forward(as_batch(image), train=False)
    if fs.aux is not None:
        bp_probs, an_probs = fs.aux.forward(feats, train=False)
        anomaly = an_probs[0, 1].astype(np.float64)
        bp_map = bp_probs[0].argmax(axis=0) + 1 if bodypart is None else bodypart
    else:
        anomaly = np.zeros(image.shape)
        bp_map = np.ones(image.shape, dtype=np.intp) if bodypart is None else bodypart
    contexts = []
    for t in tasks:
        probs = t.decoder.forward(feats, train=False)[0]
        dist = t.distribution or BodyPartDistribution(np.ones(1), np.zeros(3))
        sigma_p = dist.bbox_extent / 2.0
        contexts.append(build_context(t.task, probs.astype(np.float64), t.class_ids, bp_map, dist,
                                      np.clip(anomaly, 0, 1), sigma_p, fs.anomaly_sigma))
    return merge_predictions(contexts, draft)


def merged_metrics(fs: FrameworkState, datasets: dict[str, PhantomDataset]) -> list[MetricRow]:
    """Metrics of the merged output on every learned dataset's test split (its labeled classes)."""
    rows = []
    step = len(fs.tasks)
    for t in fs.tasks:
        test = train_test_split(datasets[t.task], fs.plan.seed)[1]
        preds = [merge_volume(fs, s.image)[0] for s in test.samples]
        rows.extend(class_metrics(preds, [s.label for s in test.samples], t.class_ids, test.spacing,
                                  step, f"merged:{t.task}"))
    return rows


# -- baselines --------------------------------------------------------------

@dataclass
class SharedModel:
    """One encoder and one decoder whose output channels grow with every step."""
    encoder: Encoder
    decoder: Decoder
    channels: list[int]                     # channel i + 1 predicts global id channels[i]
    snapshots: dict[str, list[MetricRow]] = field(default_factory=dict)
    seen: list[str] = field(default_factory=list)

    def lut(self, n_global: int) -> np.ndarray:
        return label_lut(self.channels, max(n_global, max(self.channels)))


def shared_from_base(encoder: Encoder, state: TaskState) -> SharedModel:
    enc, dec = copy.deepcopy(encoder).unfreeze(), copy.deepcopy(state.decoder).unfreeze()
    return SharedModel(enc, dec, list(state.class_ids), {state.task: list(state.snapshot)}, [state.task])


def expand_head(decoder: Decoder, n_new: int) -> None:
    """Add ``n_new`` output channels initialized from background (bias shifted by log(n_new + 1))."""
    if n_new <= 0:
        return
    head = decoder.head
    w, b = head.params["weight"], head.params["bias"]
    shift = np.float32(np.log(n_new + 1))
    new_w = np.concatenate([w, np.repeat(w[:1], n_new, axis=0)])
    new_b = np.concatenate([b, np.repeat(b[:1] - shift, n_new)])
    new_b[0] -= shift
    head.params["weight"], head.params["bias"] = new_w.astype(w.dtype), new_b.astype(b.dtype)
    head.cout += n_new
    decoder.n_classes += n_new


def baseline_step(model: SharedModel, dataset: PhantomDataset, mode: str, epochs: int, seed: int = 0,
                  step: int | None = None, lr: float = LR, momentum: float = MOMENTUM) -> SharedModel:
    """Update the shared model in place on one dataset with the mode's objective."""
    _require_single(dataset)
    if mode not in BASELINE_MODES:
        raise ValueError(f"unknown baseline mode {mode!r}")
    trainval, test = train_test_split(dataset, seed)
    old_channels = list(model.channels)
    new_ids = [c for c in sorted(dataset.labeled) if c not in model.channels]
    old_model = copy.deepcopy(model) if mode != "finetune" else None
    model.channels.extend(new_ids)
    expand_head(model.decoder, len(new_ids))
    if mode == "ilt":
        model.encoder.freeze()
    elif model.encoder.frozen:
        model.encoder.unfreeze()
    n_global = int(max(max(model.channels), max(int(s.label.max()) for s in dataset.samples)))
    lut = model.lut(n_global)
    old_ch = set(range(1, len(old_channels) + 1))
    cur_ch = {int(lut[c]) for c in dataset.labeled}
    overlap = old_ch & cur_ch
    modules = [model.decoder] + ([] if model.encoder.frozen else [model.encoder])
    opt = SGD(modules, lr=lr, momentum=momentum)
    rng = np.random.default_rng(derived_seed(seed, dataset.name, mode))
    for epoch in range(epochs):
        opt.lr = poly_lr(lr, epoch, epochs)
        for idx in epoch_batches(len(trainval), rng, BATCH_SIZE):
            batch = [trainval.samples[i] for i in idx]
            x = np.stack([s.image for s in batch])[:, None]
            labels = lut[np.stack([s.label for s in batch]).astype(np.intp)]
            feats = model.encoder.forward(x, train=not model.encoder.frozen)
            probs = model.decoder.forward(feats, train=True)
            enc_extra = None
            if mode == "finetune":
                loss = dice_ce_loss(probs, labels)
            elif mode in ("mib", "ilt"):
                old_probs = old_model.decoder.forward(old_model.encoder.forward(x, train=False), train=False)
                loss = unce_loss(probs, labels, old_ch, overlap, cur_ch) + \
                    unkd_loss(probs, old_probs, old_ch, cur_ch, overlap)
            else:
                loss = dice_ce_loss(probs, labels)
                old_feats = old_model.encoder.forward(x, train=False)
                _, enc_extra = pod_distill_loss(feats, old_feats)
            opt.zero_grad()
            grads = model.decoder.backward(loss.grad)
            if not model.encoder.frozen:
                if enc_extra is not None:
                    grads = _add_grads(grads, enc_extra)
                model.encoder.backward(grads)
            opt.step()
    step = step if step is not None else len(model.seen) + 1
    preds = [to_global(p, model.channels) for p in segment(model.encoder, model.decoder,
                                                            [s.image for s in test.samples])]
    model.snapshots[dataset.name] = class_metrics(preds, [s.label for s in test.samples], sorted(dataset.labeled),
                                                  test.spacing, step, dataset.name)
    model.seen.append(dataset.name)
    return model


def baseline_rows(model: SharedModel, datasets: dict[str, PhantomDataset], step: int, seed: int = 0) -> list[MetricRow]:
    """Current metrics of the shared model on every dataset seen so far, with forgetting."""
    rows = []
    for name in model.seen:
        test = train_test_split(datasets[name], seed)[1]
        preds = [to_global(p, model.channels) for p in segment(model.encoder, model.decoder,
                                                                [s.image for s in test.samples])]
        cur = class_metrics(preds, [s.label for s in test.samples], sorted(datasets[name].labeled),
                            test.spacing, step, name)
        snap = {r.cls: r.dsc for r in model.snapshots[name]}
        for r in cur:
            r.forget_pct = forgetting_rate(snap[r.cls], r.dsc) if snap[r.cls] > 0 else None
        rows.extend(cur)
    return rows


def run_baseline(datasets: dict[str, PhantomDataset], plan: ContinualPlan, encoder: Encoder,
                 first: TaskState) -> tuple[SharedModel, list[MetricRow]]:
    """Sequential shared-model baseline from a trained base step; returns the model and all step rows."""
    mode = plan.baseline or "finetune"
    model = shared_from_base(encoder, first)
    rows = baseline_rows(model, datasets, 1, plan.seed)
    for t, name in enumerate(plan.order[1:], start=2):
        baseline_step(model, datasets[name], mode, plan.step_epochs, plan.seed, step=t, lr=plan.lr,
                      momentum=plan.momentum)
        rows.extend(baseline_rows(model, datasets, t, plan.seed))
    return model, rows
