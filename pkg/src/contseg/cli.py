"""Command-line pipeline: generate, train-base, step, merge, evaluate, report, run.

Layout under the state root (``--root`` or ``$CONTSEG_STATE_ROOT``)::

    data/<dataset>/            phantom datasets
    runs/<run>/                one framework state per order (and baseline mode)

Exit codes: 0 ok, 2 config error, 3 stage-order error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

STATE_ENV = "CONTSEG_STATE_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_DIVERGENCE = 0, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
BASE_KEYS = ("seed", "data_seed", "base_epochs", "widths", "lr", "momentum")

log = logging.getLogger("contseg")


class ConfigError(ValueError):
    """Unreadable or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    root: str = "contseg-state"
    order: str = "A"
    custom_order: list[str] = field(default_factory=list)
    seed: int = 0
    data_seed: int = 0
    phantom: str | None = None            # JSON file: {"datasets": {id: spec}, "registry": {...}}
    tau: float = 0.01
    baseline: str | None = None
    prune: bool = True
    nas: bool = True
    base_epochs: int = 40
    step_epochs: int = 30
    nas_epochs: int = 10
    distill_epochs: int = 5
    finetune_epochs: int = 5
    lr: float = 0.1
    momentum: float = 0.9
    widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])

    def __post_init__(self):
        from .css import BASELINE_MODES, ORDERS

        if self.order not in (*ORDERS, "custom"):
            raise ConfigError(f"order must be A, B or custom, got {self.order!r}")
        if self.order == "custom" and not self.custom_order:
            raise ConfigError("a custom order needs a dataset list")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.baseline is not None and self.baseline not in BASELINE_MODES:
            raise ConfigError(f"unknown baseline mode {self.baseline!r}")
        if self.phantom is not None and not Path(self.phantom).exists():
            raise ConfigError(f"phantom spec file {self.phantom} does not exist")

    @classmethod
    def from_sources(cls, path: str | None, overrides: dict, defaults: dict | None = None) -> "ExperimentConfig":
        """``defaults``, then config file values, then non-None flag values on top."""
        values: dict = {k: v for k, v in (defaults or {}).items() if v is not None}
        if path is not None:
            try:
                loaded = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError("config must be a JSON object")
            if isinstance(loaded.get("order"), list):
                loaded["custom_order"], loaded["order"] = loaded["order"], "custom"
            values.update(loaded)
        values.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def datasets(self) -> tuple[str, ...]:
        from .css import ORDERS

        return tuple(self.custom_order) if self.order == "custom" else ORDERS[self.order]

    @property
    def run_name(self) -> str:
        name = self.order if self.order != "custom" else "custom-" + "-".join(self.custom_order)
        return f"{name}-{self.baseline}" if self.baseline else name

    @property
    def data_dir(self) -> Path:
        return Path(self.root) / "data"

    @property
    def run_dir(self) -> Path:
        return Path(self.root) / "runs" / self.run_name

    def plan(self):
        from .css import ContinualPlan

        try:
            return ContinualPlan(order=self.datasets, base_epochs=self.base_epochs, step_epochs=self.step_epochs,
                                 nas_epochs=self.nas_epochs, distill_epochs=self.distill_epochs,
                                 finetune_epochs=self.finetune_epochs, seed=self.seed, tau=self.tau,
                                 baseline=self.baseline, prune=self.prune, nas=self.nas,
                                 widths=tuple(self.widths), lr=self.lr, momentum=self.momentum)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def base_signature(self) -> dict:
        d = asdict(self)
        return {"first": self.datasets[0], "phantom": self.phantom, **{k: d[k] for k in BASE_KEYS}}


# -- helpers ----------------------------------------------------------------

def phantom_specs(cfg: ExperimentConfig):
    """``(specs by dataset id, registry)`` from the phantom file or the defaults."""
    from .phantom import ClassRegistry, PhantomSpec, default_registry, default_specs

    if cfg.phantom is None:
        return default_specs(cfg.data_seed), default_registry()
    try:
        raw = json.loads(Path(cfg.phantom).read_text())
        specs = {name: PhantomSpec.from_dict(d) for name, d in raw["datasets"].items()}
        reg = ClassRegistry.from_dict(raw["registry"]) if raw.get("registry") else default_registry()
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad phantom spec file {cfg.phantom}: {exc}") from exc
    return specs, reg


def load_one(cfg: ExperimentConfig, name: str):
    """Read exactly one dataset from disk."""
    from .css import StageError
    from .phantom import load_dataset

    path = cfg.data_dir / name
    if not (path / "manifest.json").exists():
        raise StageError(f"dataset {name!r} not found under {cfg.data_dir}; run 'generate' first")
    return load_dataset(path)


def load_run(cfg: ExperimentConfig):
    from .css import StageError, load_state

    if not (cfg.run_dir / "encoder.ckpt").exists():
        raise StageError(f"no trained state in {cfg.run_dir}; run 'train-base' first")
    return load_state(cfg.run_dir, cfg.plan())


def registry_names(cfg: ExperimentConfig) -> list[str]:
    from .phantom import ClassRegistry, default_registry

    manifest = cfg.data_dir / cfg.datasets[0] / "manifest.json"
    if manifest.exists():
        reg = json.loads(manifest.read_text()).get("registry")
        if reg:
            return ClassRegistry.from_dict(reg).names
    return default_registry().names


def write_run_config(cfg: ExperimentConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))


def find_base(cfg: ExperimentConfig):
    """A finished base step with an identical signature in a sibling run, if any."""
    from .css import load_state

    runs = Path(cfg.root) / "runs"
    if not runs.is_dir():
        return None
    for other in sorted(runs.iterdir()):
        conf, ckpt = other / "config.json", other / "task_1" / "decoder.ckpt"
        if other == cfg.run_dir or not (conf.exists() and ckpt.exists()):
            continue
        try:
            sig = ExperimentConfig(**json.loads(conf.read_text())).base_signature()
        except (ConfigError, TypeError):
            continue
        if sig == cfg.base_signature():
            fs = load_state(other, cfg.plan())
            fs.tasks = fs.tasks[:1]
            log.info("reusing base step from %s", other)
            return fs
    return None


# -- commands ---------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, args) -> int:
    from .phantom import generate_dataset, save_dataset

    specs, reg = phantom_specs(cfg)
    missing = [n for n in cfg.datasets if n not in specs]
    if missing:
        raise ConfigError(f"no phantom spec for {', '.join(missing)}")
    for name in cfg.datasets:
        path = save_dataset(generate_dataset(specs[name], reg), cfg.data_dir / name)
        print(f"generated {name}: {specs[name].n_samples} samples -> {path}")
    return EXIT_OK


def cmd_train_base(cfg: ExperimentConfig, args) -> int:
    from .css import FrameworkState, anomaly_sigma, save_state, train_base

    if cfg.baseline:
        raise ConfigError("baseline runs are driven by 'run'")
    ds = load_one(cfg, cfg.datasets[0])
    encoder, state, aux = train_base(ds, cfg.plan())
    fs = FrameworkState(cfg.plan(), encoder, aux, [state], anomaly_sigma(ds))
    write_run_config(cfg)
    save_state(cfg.run_dir, fs)
    print(f"base step on {ds.name}: mean DSC {mean_dsc(state.snapshot):.4f}")
    return EXIT_OK


def mean_dsc(rows) -> float:
    return sum(r.dsc for r in rows) / max(len(rows), 1)


def run_step(cfg: ExperimentConfig, fs, t: int):
    from .css import StageError, continual_step

    if not 2 <= t <= len(cfg.datasets):
        raise ConfigError(f"step must lie in 2..{len(cfg.datasets)}")
    if len(fs.tasks) < t - 1:
        raise StageError(f"step {t} needs steps 1..{t - 1} first (have {len(fs.tasks)})")
    state = continual_step(fs.encoder, load_one(cfg, cfg.datasets[t - 1]), cfg.plan(), t)
    if len(fs.tasks) >= t:
        fs.tasks[t - 1] = state
    else:
        fs.tasks.append(state)
    return state


def cmd_step(cfg: ExperimentConfig, args) -> int:
    from .css import save_state

    if cfg.baseline:
        raise ConfigError("baseline runs are driven by 'run'")
    fs = load_run(cfg)
    t = args.t if args.t is not None else len(fs.tasks) + 1
    state = run_step(cfg, fs, t)
    save_state(cfg.run_dir, fs)
    print(f"step {t} on {state.task}: kinds {','.join(state.assignment)} mask {state.prune_mask} "
          f"mean DSC {mean_dsc(state.snapshot):.4f}")
    return EXIT_OK


def cmd_merge(cfg: ExperimentConfig, args) -> int:
    from .css import merge_volume
    from .merge import win_counts, write_merged
    from .nn.tensor import load_tensor

    fs = load_run(cfg)
    if not fs.tasks:
        from .css import StageError
        raise StageError("merging needs at least one trained task")
    image = load_tensor(args.volume)
    if image.ndim != 3:
        raise ConfigError(f"{args.volume}: expected a 3D volume, got shape {image.shape}")
    merged, winner = merge_volume(fs, image, draft=args.draft)
    out = Path(args.out) if args.out else cfg.run_dir / "merged" / Path(args.volume).with_suffix(".seg").name
    out.parent.mkdir(parents=True, exist_ok=True)
    wins = win_counts(winner, fs.task_names)
    write_merged(out, merged, registry_names(cfg), wins)
    print(f"merged {len(fs.tasks)} tasks -> {out} (wins: {', '.join(f'{k}={v}' for k, v in wins.items())})")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    from .css import evaluate_steps, forgetting_table, merged_metrics, write_forgetting_table
    from .metrics import write_metrics_csv

    if cfg.baseline:
        if not (cfg.run_dir / "evaluation.csv").exists():
            from .css import StageError
            raise StageError("baseline evaluation is produced by 'run'")
        print((cfg.run_dir / "forgetting.csv").read_text(), end="")
        return EXIT_OK
    fs = load_run(cfg)
    datasets = {t.task: load_one(cfg, t.task) for t in fs.tasks}
    rows = evaluate_steps(fs, datasets)
    write_metrics_csv(cfg.run_dir / "evaluation.csv", rows)
    table = forgetting_table(rows, {t.task: t.snapshot for t in fs.tasks})
    write_forgetting_table(cfg.run_dir / "forgetting.csv", table)
    write_metrics_csv(cfg.run_dir / "merged.csv", merged_metrics(fs, datasets))
    print((cfg.run_dir / "forgetting.csv").read_text(), end="")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    from .css import StageError
    from .segnet import load_network

    run = cfg.run_dir
    if not (run / "forgetting.csv").exists():
        raise StageError("report needs 'evaluate' first")
    lines = [f"run {cfg.run_name}: order {' -> '.join(cfg.datasets)}", "", "forgetting table"]
    lines += ["  " + l for l in (run / "forgetting.csv").read_text().splitlines()]
    budget = [["kind", "name", "params", "assignment", "prune_mask"]]
    if (run / "encoder.ckpt").exists():
        enc, _ = load_network(run / "encoder.ckpt")
        budget.append(["encoder", "general", str(enc.param_count()), "", ""])
    if (run / "aux.ckpt").exists():
        aux, _ = load_network(run / "aux.ckpt")
        budget.append(["aux", "heads", str(aux.param_count()), "", ""])
    t = 1
    while (run / f"task_{t}" / "decoder.ckpt").exists():
        dec, meta = load_network(run / f"task_{t}" / "decoder.ckpt")
        budget.append(["decoder", meta["task"], str(dec.param_count()), "|".join(meta["assignment"]),
                       format(meta["prune_mask"], f"0{len(dec.blocks)}b")])
        prune = run / f"task_{t}" / "prune.csv"
        if prune.exists():
            lines += ["", f"prune report, task {t} ({meta['task']})"]
            lines += ["  " + l for l in prune.read_text().splitlines()]
        t += 1
    lines += ["", "parameter budget"] + ["  " + ",".join(r) for r in budget]
    if (run / "merged.csv").exists():
        lines += ["", "merged output"] + ["  " + l for l in (run / "merged.csv").read_text().splitlines()]
    (run / "report.txt").write_text("\n".join(lines) + "\n")
    (run / "report.csv").write_text("\n".join(",".join(r) for r in budget) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, args) -> int:
    """Whole pipeline for one order; datasets are generated when absent."""
    from .css import FrameworkState, anomaly_sigma, forgetting_table, run_baseline, save_state, train_base
    from .css import write_forgetting_table
    from .metrics import write_metrics_csv

    start = time.perf_counter()
    if any(not (cfg.data_dir / n / "manifest.json").exists() for n in cfg.datasets):
        cmd_generate(cfg, args)
    write_run_config(cfg)
    fs = find_base(cfg)
    if fs is None:
        ds = load_one(cfg, cfg.datasets[0])
        encoder, state, aux = train_base(ds, cfg.plan())
        fs = FrameworkState(cfg.plan(), encoder, aux, [state], anomaly_sigma(ds))
    if cfg.baseline:
        datasets = {n: load_one(cfg, n) for n in cfg.datasets}
        model, rows = run_baseline(datasets, cfg.plan(), fs.encoder, fs.tasks[0])
        save_state(cfg.run_dir, FrameworkState(cfg.plan(), fs.encoder, fs.aux, fs.tasks[:1], fs.anomaly_sigma))
        write_metrics_csv(cfg.run_dir / "evaluation.csv", rows)
        table = forgetting_table(rows, model.snapshots)
        write_forgetting_table(cfg.run_dir / "forgetting.csv", table)
        print((cfg.run_dir / "forgetting.csv").read_text(), end="")
    else:
        save_state(cfg.run_dir, fs)
        for t in range(len(fs.tasks) + 1, len(cfg.datasets) + 1):
            run_step(cfg, fs, t)
            save_state(cfg.run_dir, fs)
        cmd_evaluate(cfg, args)
    cmd_report(cfg, args)
    print(f"run {cfg.run_name} finished in {time.perf_counter() - start:.0f} s")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train-base": cmd_train_base,
    "step": cmd_step,
    "merge": cmd_merge,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contseg", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--config", help="JSON experiment config; flags override its values")
    p.add_argument("--root", help=f"state root (default ${STATE_ENV} or ./contseg-state)")
    p.add_argument("--order", help="A, B or custom")
    p.add_argument("--datasets", help="comma-separated dataset ids for --order custom")
    p.add_argument("--tau", type=float, help="relative DSC tolerance for pruning")
    p.add_argument("--baseline", help="finetune, mib, plop or ilt")
    p.add_argument("--no-prune", action="store_true", help="skip distillation and path selection")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="write the phantom datasets")
    sub.add_parser("train-base", help="train encoder, first decoder and auxiliary heads")
    step = sub.add_parser("step", help="add the decoder for step t (default: next)")
    step.add_argument("t", type=int, nargs="?", help="step index, 2..number of datasets")
    merge = sub.add_parser("merge", help="merge all decoders on one volume (tensor file)")
    merge.add_argument("--volume", required=True)
    merge.add_argument("--out")
    merge.add_argument("--draft", action="store_true", help="use the alternative weighting-map form")
    sub.add_parser("evaluate", help="per-step metrics and the forgetting table")
    sub.add_parser("report", help="consolidated text/CSV report")
    sub.add_parser("run", help="generate (if needed), train and evaluate a whole order")
    return p


def config_from_args(args) -> ExperimentConfig:
    overrides = {
        "root": args.root,
        "order": args.order,
        "custom_order": args.datasets.split(",") if args.datasets else None,
        "tau": args.tau,
        "baseline": args.baseline,
        "seed": args.seed,
        "prune": False if args.no_prune else None,
    }
    return ExperimentConfig.from_sources(args.config, overrides, {"root": os.environ.get(STATE_ENV)})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_CONFIG
        # only effective if no BLAS pool exists yet in this process
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .css import StageError

    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FloatingPointError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
