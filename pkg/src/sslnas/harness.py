"""Experiment orchestration: manifests, run directories, command dispatch."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .analysis import ResultTable, build_correlation_matrix, extract_features, linear_eval
from .contrastive import AugmentConfig
from .data import DatasetDescriptor, load_dataset
from .errors import ConfigError, EngineError, StructureError
from .report import emit_report, render_arch_svg
from .rng import seeded_rng
from .space import (
    build_default_space,
    count_params,
    parse_arch,
    sample_mobilenet_variant,
    sample_resnet_variant,
    serialize_arch,
    space_from_json,
    top_bottom_ratio,
)
from .supernet import derive_architecture, init_supernet
from .training import (
    ContrastiveModel,
    TrainConfig,
    load_checkpoint,
    make_checkpoint,
    pretrain,
    save_checkpoint,
    search_phase,
    supervised_train,
    warmup_phase,
    write_metrics_csv,
)

COMMANDS = ("search", "pretrain", "linear-eval", "derive", "study", "report", "supervised")


@dataclass
class ExperimentManifest:
    """Everything one experiment run needs, mirrored 1:1 by the JSON file."""

    command: str
    seed: int
    out_dir: str
    datasets: list[DatasetDescriptor] = field(default_factory=list)
    width_multiplier: float = 1.0
    arch_path: str | None = None
    weights_path: str | None = None
    checkpoint_path: str | None = None
    results_path: str | None = None
    train: dict = field(default_factory=dict)
    study: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed is mandatory and must be an integer")
        if not self.out_dir:
            raise ConfigError("out_dir is mandatory")
        for label, path in (
            ("arch", self.arch_path),
            ("weights", self.weights_path),
            ("checkpoint", self.checkpoint_path),
            ("results", self.results_path),
        ):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{label} file {path} does not exist")
        for desc in self.datasets:
            if desc.kind == "folder" and not Path(desc.root).is_dir():
                raise ConfigError(f"dataset root {desc.root} does not exist")

    @classmethod
    def from_dict(cls, raw: dict, *, command: str | None = None,
                  seed: int | None = None, out_dir: str | None = None) -> "ExperimentManifest":
        if not isinstance(raw, dict):
            raise ConfigError("manifest root must be an object")
        known = {
            "command", "seed", "out_dir", "datasets", "dataset", "space",
            "arch", "weights", "checkpoint", "results", "train", "study",
        }
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown manifest field {key!r}")
        doc_command = raw.get("command")
        if command is not None and doc_command is not None and command != doc_command:
            raise ConfigError(f"manifest command {doc_command!r} conflicts with requested {command!r}")
        resolved_command = command or doc_command
        if resolved_command is None:
            raise ConfigError("no command given (CLI argument or manifest field)")

        raw_datasets = raw.get("datasets")
        if raw_datasets is None and "dataset" in raw:
            raw_datasets = [raw["dataset"]]
        datasets = []
        for i, d in enumerate(raw_datasets or []):
            try:
                datasets.append(DatasetDescriptor.from_dict(d))
            except (TypeError, ConfigError) as e:
                raise ConfigError(f"datasets[{i}]: {e}") from e

        space = raw.get("space", {})
        if not isinstance(space, dict):
            raise ConfigError("space must be an object")

        resolved_seed = seed if seed is not None else raw.get("seed")
        if resolved_seed is None:
            raise ConfigError("seed is mandatory and must be an integer")

        return cls(
            command=resolved_command,
            seed=resolved_seed,
            out_dir=out_dir or raw.get("out_dir", ""),
            datasets=datasets,
            width_multiplier=float(space.get("width_multiplier", 1.0)),
            arch_path=raw.get("arch"),
            weights_path=raw.get("weights"),
            checkpoint_path=raw.get("checkpoint"),
            results_path=raw.get("results"),
            train=dict(raw.get("train", {})),
            study=dict(raw.get("study", {})),
        )

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentManifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"manifest {path} is not valid JSON: {e.msg} at position {e.pos}") from e
        return cls.from_dict(raw, **overrides)


def resolve_config(manifest: ExperimentManifest) -> TrainConfig:
    """Merge manifest train overrides onto the desk-scale defaults."""
    base = TrainConfig(seed=manifest.seed).to_dict()
    overrides = dict(manifest.train)
    for nested in ("augment", "projection"):
        if nested in overrides:
            merged = dict(base[nested])
            merged.update(overrides[nested])
            overrides[nested] = merged
    base.update(overrides)
    base["seed"] = manifest.seed
    if manifest.datasets and "output_size" not in manifest.train.get("augment", {}):
        base["augment"]["output_size"] = manifest.datasets[0].image_size
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, EngineError) as e:
        raise ConfigError(f"invalid train overrides: {e}") from e


@dataclass
class RunRecord:
    """Outcome summary of one experiment run."""

    command: str
    run_dir: str
    wall_time_s: float
    summary: dict
    artifacts: dict


def new_run_dir(out_dir: str | Path, command: str) -> Path:
    """Fresh timestamped directory; existing runs are never reused."""
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{command}-{stamp}"
    counter = 1
    while candidate.exists():
        candidate = base / f"{command}-{stamp}-{counter:03d}"
        counter += 1
    candidate.mkdir()
    return candidate


class _StageGuard:
    """Records the failing stage into the run directory before propagating."""

    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self.stage = "setup"

    def enter(self, stage: str) -> None:
        self.stage = stage

    def record(self, error: BaseException) -> None:
        doc = {"stage": self.stage, "type": type(error).__name__, "message": str(error)}
        (self.run_dir / "error.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def run_experiment(manifest: ExperimentManifest) -> RunRecord:
    """Dispatch a manifest, write the run directory, return the summary."""
    start = time.monotonic()
    run_dir = new_run_dir(manifest.out_dir, manifest.command)
    cfg = resolve_config(manifest)
    (run_dir / "config.json").write_text(
        json.dumps({"manifest_command": manifest.command, "seed": manifest.seed, "train": cfg.to_dict()},
                   indent=2, sort_keys=True, default=str)
    )
    guard = _StageGuard(run_dir)
    handlers = {
        "search": _cmd_search,
        "pretrain": _cmd_pretrain,
        "linear-eval": _cmd_linear_eval,
        "derive": _cmd_derive,
        "study": _cmd_study,
        "report": _cmd_report,
        "supervised": _cmd_supervised,
    }
    try:
        summary, artifacts = handlers[manifest.command](manifest, cfg, run_dir, guard)
    except BaseException as e:
        guard.record(e)
        raise
    record = RunRecord(
        command=manifest.command,
        run_dir=str(run_dir),
        wall_time_s=time.monotonic() - start,
        summary=summary,
        artifacts={k: str(v) for k, v in artifacts.items()},
    )
    (run_dir / "run.json").write_text(
        json.dumps(
            {"command": record.command, "run_dir": record.run_dir, "wall_time_s": record.wall_time_s,
             "summary": record.summary, "artifacts": record.artifacts},
            indent=2, sort_keys=True,
        )
    )
    return record


def _single_dataset(manifest: ExperimentManifest):
    if len(manifest.datasets) != 1:
        raise ConfigError(f"command {manifest.command!r} needs exactly one dataset, got {len(manifest.datasets)}")
    return load_dataset(manifest.datasets[0])


def _load_arch(manifest: ExperimentManifest):
    if manifest.arch_path is None:
        raise ConfigError(f"command {manifest.command!r} needs an arch file")
    return parse_arch(Path(manifest.arch_path).read_text())


def _cmd_search(manifest, cfg, run_dir, guard):
    guard.enter("load-data")
    data = _single_dataset(manifest)
    guard.enter("init")
    space = build_default_space(manifest.width_multiplier)
    state = init_supernet(space, cfg.seed, projection=cfg.projection)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir()
    metrics: list = []
    guard.enter("warmup")
    warmup_phase(state, data, cfg, metrics=metrics, checkpoint_dir=ckpt_dir)
    guard.enter("search")
    search_phase(state, data, cfg, metrics=metrics, checkpoint_dir=ckpt_dir)
    guard.enter("derive")
    arch = derive_architecture(state)
    derived_dir = run_dir / "derived"
    derived_dir.mkdir()
    arch_path = derived_dir / "arch.json"
    arch_path.write_text(serialize_arch(arch))
    render_arch_svg(arch, derived_dir / "arch.svg")
    guard.enter("write-metrics")
    metrics_path = run_dir / "metrics.csv"
    write_metrics_csv(metrics, metrics_path)
    summary = {
        "final_loss": metrics[-1]["loss"] if metrics else None,
        "derived_params": count_params(arch),
    }
    return summary, {"arch": arch_path, "metrics": metrics_path, "checkpoints": ckpt_dir}


def _cmd_pretrain(manifest, cfg, run_dir, guard):
    guard.enter("load-data")
    data = _single_dataset(manifest)
    arch = _load_arch(manifest)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir()
    metrics: list = []
    guard.enter("pretrain")
    model = pretrain(arch, data, cfg, metrics=metrics, checkpoint_dir=ckpt_dir)
    final = ckpt_dir / "pretrained.pt"
    save_checkpoint(final, make_checkpoint(phase="pretrain", next_epoch=cfg.pretrain_epochs, cfg=cfg, model=model))
    metrics_path = run_dir / "metrics.csv"
    write_metrics_csv(metrics, metrics_path)
    summary = {"final_loss": metrics[-1]["loss"] if metrics else None}
    return summary, {"weights": final, "metrics": metrics_path}


def _cmd_linear_eval(manifest, cfg, run_dir, guard):
    guard.enter("load-data")
    data = _single_dataset(manifest)
    arch = _load_arch(manifest)
    if manifest.weights_path is None:
        raise ConfigError("linear-eval needs a weights checkpoint")
    guard.enter("restore")
    payload = load_checkpoint(manifest.weights_path)
    model = ContrastiveModel(arch, cfg.projection)
    model.load_state_dict(payload["model"])
    guard.enter("probe")
    x_train, y_train = extract_features(model.backbone, data, data.indices("train"))
    x_eval, y_eval = extract_features(model.backbone, data, data.indices("eval"))
    top1 = linear_eval(x_train, y_train, test_features=x_eval, test_labels=y_eval)
    eval_path = run_dir / "eval.json"
    eval_path.write_text(json.dumps({"dataset": data.name, "top1": top1}, indent=2, sort_keys=True))
    return {"top1": top1}, {"eval": eval_path}


def _cmd_derive(manifest, cfg, run_dir, guard):
    if manifest.checkpoint_path is None:
        raise ConfigError("derive needs a checkpoint")
    guard.enter("restore")
    payload = load_checkpoint(manifest.checkpoint_path)
    if payload.get("space") is None:
        raise StructureError("checkpoint does not describe a search space")
    ckpt_cfg = TrainConfig.from_dict(payload["config"])
    space = space_from_json(payload["space"], payload["space"]["width_multiplier"])
    state = init_supernet(space, ckpt_cfg.seed, projection=ckpt_cfg.projection)
    state.net.load_state_dict(payload["model"])
    guard.enter("derive")
    arch = derive_architecture(state)
    arch_path = run_dir / "arch.json"
    arch_path.write_text(serialize_arch(arch))
    render_arch_svg(arch, run_dir / "arch.svg")
    return {"derived_params": count_params(arch)}, {"arch": arch_path}


def _cmd_supervised(manifest, cfg, run_dir, guard):
    guard.enter("load-data")
    data = _single_dataset(manifest)
    arch = _load_arch(manifest)
    metrics: list = []
    guard.enter("train")
    model = supervised_train(arch, data, cfg, metrics=metrics)
    guard.enter("evaluate")
    accs = {split: _classifier_accuracy(model, data, split, cfg.augment.output_size) for split in ("train", "eval")}
    metrics_path = run_dir / "metrics.csv"
    write_metrics_csv(metrics, metrics_path)
    eval_path = run_dir / "eval.json"
    eval_path.write_text(json.dumps({"dataset": data.name, "accuracy": accs}, indent=2, sort_keys=True))
    return {"accuracy": accs}, {"eval": eval_path, "metrics": metrics_path}


def _classifier_accuracy(model, data, split: str, size: int, batch_size: int = 256) -> float:
    from .training import _plain_batch

    indices = data.indices(split)
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            x, y = _plain_batch(data, indices[start : start + batch_size], size)
            correct += int((model(x).argmax(dim=1) == y).sum())
    return correct / max(1, len(indices))


def _study_variants(manifest: ExperimentManifest):
    study = manifest.study
    n_resnet = int(study.get("n_resnet", 4))
    n_mobilenet = int(study.get("n_mobilenet", 4))
    resnet_kwargs = {}
    if "resnet_widths" in study:
        resnet_kwargs["widths"] = tuple(study["resnet_widths"])
    if "resnet_blocks_range" in study:
        resnet_kwargs["blocks_range"] = tuple(study["resnet_blocks_range"])
    mobilenet_kwargs = {}
    if "mobilenet_widths" in study:
        mobilenet_kwargs["widths"] = tuple(study["mobilenet_widths"])
    if "mobilenet_blocks_range" in study:
        mobilenet_kwargs["blocks_range"] = tuple(study["mobilenet_blocks_range"])

    variants = []
    for i in range(n_resnet):
        rng = seeded_rng(manifest.seed, "study", "resnet", i)
        variants.append((f"resnet_{i:02d}", sample_resnet_variant(rng, **resnet_kwargs)))
    for i in range(n_mobilenet):
        rng = seeded_rng(manifest.seed, "study", "mobilenet", i)
        variants.append((f"mobilenet_{i:02d}", sample_mobilenet_variant(rng, **mobilenet_kwargs)))
    for i, path in enumerate(study.get("archs", [])):
        if not Path(path).is_file():
            raise ConfigError(f"study arch file {path} does not exist")
        variants.append((Path(path).stem, parse_arch(Path(path).read_text())))
    if len(variants) < 3:
        raise ConfigError("a correlation study needs at least 3 model variants")
    return variants


def _cmd_study(manifest, cfg, run_dir, guard):
    if len(manifest.datasets) < 2:
        raise ConfigError("a correlation study needs at least 2 datasets")
    guard.enter("load-data")
    datasets = [load_dataset(d) for d in manifest.datasets]
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ConfigError(f"dataset names must be unique, got {names}")
    variants = _study_variants(manifest)
    epochs = int(manifest.study.get("pretrain_epochs", cfg.pretrain_epochs))

    guard.enter("pretrain-eval-grid")
    accuracy = np.zeros((len(variants), len(datasets)))
    for i, (label, arch) in enumerate(variants):
        for j, data in enumerate(datasets):
            model = pretrain(arch, data, cfg, epochs=epochs)
            x_train, y_train = extract_features(model.backbone, data, data.indices("train"))
            x_eval, y_eval = extract_features(model.backbone, data, data.indices("eval"))
            accuracy[i, j] = linear_eval(x_train, y_train, test_features=x_eval, test_labels=y_eval)

    guard.enter("correlate")
    table = ResultTable(
        models=tuple(label for label, _ in variants),
        datasets=tuple(names),
        accuracy=accuracy,
        params=tuple(count_params(a) for _, a in variants),
        ratios=tuple(top_bottom_ratio(a) for _, a in variants),
    )
    correlation = build_correlation_matrix(table)
    guard.enter("emit")
    written = emit_report(correlation, table, run_dir, archs=dict(variants))
    summary = {
        "models": len(variants),
        "datasets": names,
        "mean_top1": {name: float(accuracy[:, j].mean()) for j, name in enumerate(names)},
    }
    return summary, {p.stem: p for p in written}


def read_results_csv(path: str | Path) -> ResultTable:
    """Rebuild a result table from results.csv (model,dataset,top1,params,ratio)."""
    models: list[str] = []
    datasets: list[str] = []
    cells: dict[tuple[str, str], float] = {}
    params: dict[str, int] = {}
    ratios: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"model", "dataset", "top1", "params", "ratio"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise StructureError(f"results csv must have columns {sorted(expected)}, got {reader.fieldnames}")
        for row in reader:
            model, dataset = row["model"], row["dataset"]
            if model not in models:
                models.append(model)
            if dataset not in datasets:
                datasets.append(dataset)
            cells[(model, dataset)] = float(row["top1"])
            params[model] = int(row["params"])
            ratios[model] = float(row["ratio"])
    grid = np.full((len(models), len(datasets)), np.nan)
    for (model, dataset), value in cells.items():
        grid[models.index(model), datasets.index(dataset)] = value
    return ResultTable(
        models=tuple(models),
        datasets=tuple(datasets),
        accuracy=grid,
        params=tuple(params[m] for m in models),
        ratios=tuple(ratios[m] for m in models),
    )


def _cmd_report(manifest, cfg, run_dir, guard):
    if manifest.results_path is None:
        raise ConfigError("report needs a results csv")
    guard.enter("read-results")
    table = read_results_csv(manifest.results_path)
    guard.enter("correlate")
    correlation = build_correlation_matrix(table)
    guard.enter("emit")
    written = emit_report(correlation, table, run_dir)
    return {"models": len(table.models), "datasets": list(table.datasets)}, {p.stem: p for p in written}
