"""Training phases and their plumbing: warmup, search, pretraining, supervised.

Network weights use SGD with momentum; architecture logits use Adam.  Both
learning rates follow a per-phase cosine schedule evaluated at epoch
granularity.  All stochasticity (shuffling, gate sampling, augmentation)
draws from streams keyed by (seed, phase, epoch, ...), so a run is a pure
function of its config and checkpoint resume is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .contrastive import AugmentConfig, EmbeddingBatch, ProjectionHeadSpec, augment_pair, nt_xent
from .errors import CheckpointError, DataError, DomainError
from .networks import build_backbone
from .rng import seeded_rng
from .space import ArchitectureSpec, space_hash, space_to_json
from .supernet import (
    SupernetState,
    arch_gradient,
    forward_subnet,
    forward_subnet_with_gates,
    init_weights,
    sample_gates,
)

CHECKPOINT_SCHEMA_VERSION = 1

ESTIMATOR_GATE = "gate"
ESTIMATOR_SCORE = "score"


@dataclass
class TrainConfig:
    """Schedules, optimizers, and batch/epoch counts for every phase.

    Defaults are desk-scale (32x32 inputs, epochs a tenth of the full-scale
    recipe); ``full_scale`` restores the reference schedule.
    """

    warmup_epochs: int = 4
    search_epochs: int = 12
    pretrain_epochs: int = 10
    batch_size: int = 64
    lr_weights: float = 0.25
    lr_alpha: float = 0.1
    weight_decay: float = 4e-5
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    alpha_split_fraction: float = 0.2
    temperature: float = 0.1
    alpha_estimator: str = ESTIMATOR_GATE
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    projection: ProjectionHeadSpec = field(default_factory=ProjectionHeadSpec)

    def __post_init__(self):
        positive = (
            "warmup_epochs", "search_epochs", "pretrain_epochs", "batch_size",
            "lr_weights", "temperature",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")
        # lr_alpha == 0 is allowed: it freezes the search, a useful diagnostic.
        if self.lr_alpha < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise DomainError("lr_alpha, weight_decay, and momentum must be non-negative")
        if not (0 < self.alpha_split_fraction <= 0.5):
            raise DomainError(f"alpha_split_fraction must lie in (0, 0.5], got {self.alpha_split_fraction}")
        if self.alpha_estimator not in (ESTIMATOR_GATE, ESTIMATOR_SCORE):
            raise DomainError(f"unknown alpha estimator {self.alpha_estimator!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(warmup_epochs=40, search_epochs=120, pretrain_epochs=100, batch_size=640)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        if "augment" in raw and isinstance(raw["augment"], dict):
            aug = dict(raw["augment"])
            for key in ("crop_scale", "crop_ratio"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            raw["augment"] = AugmentConfig(**aug)
        if "projection" in raw and isinstance(raw["projection"], dict):
            raw["projection"] = ProjectionHeadSpec(**raw["projection"])
        if "adam_betas" in raw:
            raw["adam_betas"] = tuple(raw["adam_betas"])
        return cls(**raw)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def cosine_lr(lr0: float, t: int, total: int) -> float:
    """lr0 * (1 + cos(pi * t / total)) / 2 for 0 <= t <= total."""
    if total < 1:
        raise DomainError(f"schedule length must be >= 1, got {total}")
    if not (0 <= t <= total):
        raise DomainError(f"schedule step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def split_decay_params(module: nn.Module) -> tuple[list, list, set[str]]:
    """Partition parameters into (decayed, undecayed, undecayed names).

    Normalization scale/shift parameters are exempt from weight decay.
    """
    no_decay, decay, names = [], [], set()
    norm_param_ids = {}
    for mod_name, mod in module.named_modules():
        if isinstance(mod, (nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm, nn.LayerNorm)):
            for p_name, p in mod.named_parameters(recurse=False):
                norm_param_ids[id(p)] = f"{mod_name}.{p_name}" if mod_name else p_name
    for name, p in module.named_parameters():
        if id(p) in norm_param_ids:
            no_decay.append(p)
            names.add(name)
        else:
            decay.append(p)
    return decay, no_decay, names


def make_weight_optimizer(module: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    decay, no_decay, _ = split_decay_params(module)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.SGD(groups, lr=cfg.lr_weights, momentum=cfg.momentum)


def make_alpha_optimizer(state: SupernetState, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        list(state.net.alphas), lr=cfg.lr_alpha, betas=cfg.adam_betas, eps=cfg.adam_eps
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def _epoch_batches(indices: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(np.asarray(indices, dtype=np.int64))
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def _ssl_views(data, idx_batch: Iterable[int], cfg: TrainConfig, phase: str, epoch: int) -> torch.Tensor:
    """Paired augmented views, rows (2i, 2i+1) sharing a source image."""
    rows = []
    for i in idx_batch:
        rng = seeded_rng(cfg.seed, "aug", phase, epoch, int(i))
        view_a, view_b = augment_pair(data.image(int(i)), cfg.augment, rng)
        rows.append(data.normalize(view_a))
        rows.append(data.normalize(view_b))
    return torch.stack(rows)


def _plain_batch(data, idx_batch: Iterable[int], size: int) -> tuple[torch.Tensor, torch.Tensor]:
    images, labels = [], []
    for i in idx_batch:
        img = data.image(int(i))
        if img.shape[-1] != size or img.shape[-2] != size:
            img = TF.resize(img, [size, size], interpolation=InterpolationMode.BILINEAR, antialias=True)
        images.append(data.normalize(img))
        labels.append(data.label(int(i)))
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)


def alpha_split_indices(data, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically hold out a fraction of the train split for alpha steps."""
    train = np.asarray(data.indices("train"), dtype=np.int64)
    if len(train) < 2:
        raise DataError("need at least 2 training samples to split")
    perm = seeded_rng(cfg.seed, "alpha-split").permutation(train)
    n_alpha = max(1, int(round(cfg.alpha_split_fraction * len(train))))
    alpha = np.sort(perm[:n_alpha])
    weight = np.sort(perm[n_alpha:])
    if len(weight) == 0:
        raise DataError("alpha split consumed every training sample")
    return weight, alpha


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ("epoch", "phase", "loss", "lr_w", "lr_alpha")


def metrics_row(epoch: int, phase: str, loss: float, lr_w: float, lr_alpha: float | None) -> dict:
    return {
        "epoch": epoch,
        "phase": phase,
        "loss": loss,
        "lr_w": lr_w,
        "lr_alpha": "" if lr_alpha is None else lr_alpha,
    }


def write_metrics_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def make_checkpoint(
    *,
    phase: str,
    next_epoch: int,
    cfg: TrainConfig,
    model: nn.Module,
    w_opt: torch.optim.Optimizer | None = None,
    a_opt: torch.optim.Optimizer | None = None,
    counters: dict | None = None,
    space=None,
) -> dict:
    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "phase": phase,
        "next_epoch": next_epoch,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "space": dict(space_to_json(space), width_multiplier=space.width_multiplier) if space is not None else None,
        "space_hash": space_hash(space) if space is not None else None,
        "model": model.state_dict(),
        "w_opt": w_opt.state_dict() if w_opt is not None else None,
        "a_opt": a_opt.state_dict() if a_opt is not None else None,
        "counters": dict(counters or {}),
    }


def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"checkpoint {path} is unreadable: {e}") from e
    if not isinstance(payload, dict) or payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint {path} has an unsupported layout")
    if expected_config_hash is not None and payload["config_hash"] != expected_config_hash:
        raise CheckpointError(
            "config hash mismatch: expected "
            f"{expected_config_hash}, checkpoint carries {payload['config_hash']}"
        )
    return payload


def _maybe_checkpoint(checkpoint_dir, *, phase, next_epoch, cfg, model, w_opt, a_opt, counters, space):
    if checkpoint_dir is None:
        return
    path = Path(checkpoint_dir) / f"epoch_{phase}_{next_epoch - 1}.pt"
    save_checkpoint(
        path,
        make_checkpoint(
            phase=phase, next_epoch=next_epoch, cfg=cfg, model=model,
            w_opt=w_opt, a_opt=a_opt, counters=counters, space=space,
        ),
    )


# ---------------------------------------------------------------------------
# supernet phases
# ---------------------------------------------------------------------------


def _weight_step(state: SupernetState, w_opt, views: torch.Tensor, gates, cfg: TrainConfig) -> float:
    features = forward_subnet(state, gates, views)
    z = state.net.projection(features)
    loss = nt_xent(EmbeddingBatch(z=z, temperature=cfg.temperature))
    w_opt.zero_grad(set_to_none=True)
    loss.backward()
    w_opt.step()
    return float(loss.detach())


def warmup_phase(
    state: SupernetState,
    data,
    cfg: TrainConfig,
    *,
    w_opt: torch.optim.Optimizer | None = None,
    metrics: list | None = None,
    checkpoint_dir: str | Path | None = None,
    start_epoch: int = 0,
    end_epoch: int | None = None,
) -> SupernetState:
    """Weight-only epochs on sampled subnets; alpha stays bit-identical."""
    weight_idx, _ = alpha_split_indices(data, cfg)
    if len(weight_idx) == 0:
        raise DataError("empty dataset")
    w_opt = w_opt or make_weight_optimizer(state.net, cfg)
    end_epoch = cfg.warmup_epochs if end_epoch is None else end_epoch
    state.net.train()
    for epoch in range(start_epoch, end_epoch):
        lr = cosine_lr(cfg.lr_weights, epoch, cfg.warmup_epochs)
        _set_lr(w_opt, lr)
        losses = []
        shuffle = seeded_rng(cfg.seed, "shuffle", "warmup", epoch)
        for step, batch in enumerate(_epoch_batches(weight_idx, cfg.batch_size, shuffle)):
            if len(batch) < 2:
                continue
            gates = sample_gates(state, seeded_rng(cfg.seed, "gates", "warmup", epoch, step))
            views = _ssl_views(data, batch, cfg, "warmup", epoch)
            losses.append(_weight_step(state, w_opt, views, gates, cfg))
        state.counters["warmup_next_epoch"] = epoch + 1
        if metrics is not None:
            metrics.append(metrics_row(epoch, "warmup", float(np.mean(losses)), lr, None))
        _maybe_checkpoint(
            checkpoint_dir, phase="warmup", next_epoch=epoch + 1, cfg=cfg, model=state.net,
            w_opt=w_opt, a_opt=None, counters=state.counters, space=state.space,
        )
    return state


@dataclass
class SearchAudit:
    """Records which sample indices fed weight vs alpha gradients."""

    weight_indices: set = field(default_factory=set)
    alpha_indices: set = field(default_factory=set)
    prob_history: list = field(default_factory=list)


def _alpha_step(state: SupernetState, a_opt, views: torch.Tensor, gates, cfg: TrainConfig) -> float:
    """One architecture-logit update from the sampled path.

    The default estimator reads each edge's sensitivity as the gradient of
    the loss w.r.t. a multiplicative gate on the sampled path; the score
    estimator uses the baseline-centered loss value weighted by the inverse
    path probability.  Either way the per-edge sensitivity vector is pulled
    back through the softmax Jacobian by ``arch_gradient``.
    """
    if cfg.alpha_estimator == ESTIMATOR_GATE:
        features, gate_tensors = forward_subnet_with_gates(state, gates, views)
        z = state.net.projection(features)
        loss = nt_xent(EmbeddingBatch(z=z, temperature=cfg.temperature))
        live = [g for g in gate_tensors if g is not None]
        grads = torch.autograd.grad(loss, live, allow_unused=False) if live else []
        grads_iter = iter(grads)
        sensitivities = [None if g is None else float(next(grads_iter)) for g in gate_tensors]
        loss_value = float(loss.detach())
    else:
        with torch.no_grad():
            features = forward_subnet(state, gates, views)
            z = state.net.projection(features)
            loss_value = float(nt_xent(EmbeddingBatch(z=z, temperature=cfg.temperature)))
        baseline = state.counters.get("alpha_baseline")
        if baseline is None:
            baseline = loss_value
        advantage = loss_value - baseline
        state.counters["alpha_baseline"] = 0.9 * baseline + 0.1 * loss_value
        sensitivities = []
        for edge, choice, probs in zip(state.edges, gates.chosen, gates.probs):
            sensitivities.append(advantage / float(probs[choice]))

    a_opt.zero_grad(set_to_none=True)
    for i, (edge, choice, probs) in enumerate(zip(state.edges, gates.chosen, gates.probs)):
        gate_grads = np.zeros(len(probs))
        s = sensitivities[i]
        if s is not None:
            gate_grads[choice] = s
        grad = arch_gradient(probs, gate_grads)
        edge.alpha.grad = torch.from_numpy(grad).to(edge.alpha.dtype)
    a_opt.step()
    return loss_value


def search_phase(
    state: SupernetState,
    data,
    cfg: TrainConfig,
    *,
    w_opt: torch.optim.Optimizer | None = None,
    a_opt: torch.optim.Optimizer | None = None,
    metrics: list | None = None,
    audit: SearchAudit | None = None,
    checkpoint_dir: str | Path | None = None,
    start_epoch: int = 0,
    end_epoch: int | None = None,
) -> SupernetState:
    """Alternate weight steps (weight split) and alpha steps (held-out split).

    Weight batches never feed alpha gradients; the two index sets are
    disjoint by construction and auditable via ``SearchAudit``.
    """
    weight_idx, alpha_idx = alpha_split_indices(data, cfg)
    if len(alpha_idx) < 2:
        raise DataError("alpha split too small; lower alpha_split_fraction or add data")
    w_opt = w_opt or make_weight_optimizer(state.net, cfg)
    a_opt = a_opt or make_alpha_optimizer(state, cfg)
    end_epoch = cfg.search_epochs if end_epoch is None else end_epoch
    state.net.train()
    for epoch in range(start_epoch, end_epoch):
        lr_w = cosine_lr(cfg.lr_weights, epoch, cfg.search_epochs)
        lr_a = cosine_lr(cfg.lr_alpha, epoch, cfg.search_epochs)
        _set_lr(w_opt, lr_w)
        _set_lr(a_opt, lr_a)
        w_batches = _epoch_batches(weight_idx, cfg.batch_size, seeded_rng(cfg.seed, "shuffle", "search-w", epoch))
        a_batches = _epoch_batches(alpha_idx, cfg.batch_size, seeded_rng(cfg.seed, "shuffle", "search-a", epoch))
        a_batches = [b for b in a_batches if len(b) >= 2]
        w_losses, a_losses = [], []
        a_cursor = 0
        for step, batch in enumerate(w_batches):
            if len(batch) < 2:
                continue
            gates = sample_gates(state, seeded_rng(cfg.seed, "gates", "search-w", epoch, step))
            views = _ssl_views(data, batch, cfg, "search-w", epoch)
            w_losses.append(_weight_step(state, w_opt, views, gates, cfg))
            if audit is not None:
                audit.weight_indices.update(int(i) for i in batch)

            a_batch = a_batches[a_cursor % len(a_batches)]
            a_cursor += 1
            a_gates = sample_gates(state, seeded_rng(cfg.seed, "gates", "search-a", epoch, step))
            a_views = _ssl_views(data, a_batch, cfg, "search-a", epoch)
            a_losses.append(_alpha_step(state, a_opt, a_views, a_gates, cfg))
            if audit is not None:
                audit.alpha_indices.update(int(i) for i in a_batch)
        state.counters["search_next_epoch"] = epoch + 1
        if metrics is not None:
            metrics.append(metrics_row(epoch, "search", float(np.mean(w_losses)), lr_w, lr_a))
        if audit is not None:
            from .supernet import path_probabilities

            audit.prob_history.append([path_probabilities(e) for e in state.edges])
        _maybe_checkpoint(
            checkpoint_dir, phase="search", next_epoch=epoch + 1, cfg=cfg, model=state.net,
            w_opt=w_opt, a_opt=a_opt, counters=state.counters, space=state.space,
        )
    return state


# ---------------------------------------------------------------------------
# fixed-topology training
# ---------------------------------------------------------------------------


class ContrastiveModel(nn.Module):
    """Backbone plus projection head; forward yields normalized embeddings."""

    def __init__(self, arch: ArchitectureSpec, projection: ProjectionHeadSpec, dtype=torch.float64):
        super().__init__()
        self.backbone = build_backbone(arch, dtype)
        from .contrastive import ProjectionHead

        self.projection = ProjectionHead(self.backbone.feature_dim, projection).to(dtype)

    def forward(self, x):
        return self.projection(self.backbone(x))


class ClassifierModel(nn.Module):
    """Backbone plus a linear classification head."""

    def __init__(self, arch: ArchitectureSpec, num_classes: int, dtype=torch.float64):
        super().__init__()
        self.backbone = build_backbone(arch, dtype)
        self.head = nn.Linear(self.backbone.feature_dim, num_classes).to(dtype)

    def forward(self, x):
        return self.head(self.backbone(x))


def pretrain(
    arch: ArchitectureSpec,
    data,
    cfg: TrainConfig,
    *,
    metrics: list | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: dict | None = None,
    epochs: int | None = None,
) -> ContrastiveModel:
    """From-scratch contrastive training of a fixed topology.

    With ``epochs=0`` the deterministic initialization is returned untouched.
    """
    model = ContrastiveModel(arch, cfg.projection)
    init_weights(model, cfg.seed)
    w_opt = make_weight_optimizer(model, cfg)
    start_epoch = 0
    if resume is not None:
        model.load_state_dict(resume["model"])
        w_opt.load_state_dict(resume["w_opt"])
        start_epoch = resume["next_epoch"]
    total = cfg.pretrain_epochs if epochs is None else epochs
    train_idx = np.asarray(data.indices("train"), dtype=np.int64)
    if len(train_idx) == 0:
        raise DataError("empty dataset")
    model.train()
    for epoch in range(start_epoch, total):
        lr = cosine_lr(cfg.lr_weights, epoch, max(total, 1))
        _set_lr(w_opt, lr)
        losses = []
        shuffle = seeded_rng(cfg.seed, "shuffle", "pretrain", epoch)
        for batch in _epoch_batches(train_idx, cfg.batch_size, shuffle):
            if len(batch) < 2:
                continue
            views = _ssl_views(data, batch, cfg, "pretrain", epoch)
            z = model(views)
            loss = nt_xent(EmbeddingBatch(z=z, temperature=cfg.temperature))
            w_opt.zero_grad(set_to_none=True)
            loss.backward()
            w_opt.step()
            losses.append(float(loss.detach()))
        if metrics is not None:
            metrics.append(metrics_row(epoch, "pretrain", float(np.mean(losses)), lr, None))
        _maybe_checkpoint(
            checkpoint_dir, phase="pretrain", next_epoch=epoch + 1, cfg=cfg, model=model,
            w_opt=w_opt, a_opt=None, counters={}, space=None,
        )
    return model


def supervised_train(
    arch: ArchitectureSpec,
    data,
    cfg: TrainConfig,
    *,
    num_classes: int | None = None,
    metrics: list | None = None,
    epochs: int | None = None,
) -> ClassifierModel:
    """Cross-entropy training of backbone plus linear head, no pretraining."""
    labels = np.asarray([data.label(int(i)) for i in data.indices("train")])
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    if num_classes < 2:
        raise DataError(f"supervised training needs >= 2 classes, got {num_classes}")
    if len(labels) and labels.max() >= num_classes:
        raise DataError(f"label {labels.max()} outside the configured {num_classes} classes")
    model = ClassifierModel(arch, num_classes)
    init_weights(model, cfg.seed)
    w_opt = make_weight_optimizer(model, cfg)
    total = cfg.pretrain_epochs if epochs is None else epochs
    train_idx = np.asarray(data.indices("train"), dtype=np.int64)
    size = cfg.augment.output_size
    model.train()
    for epoch in range(0, total):
        lr = cosine_lr(cfg.lr_weights, epoch, max(total, 1))
        _set_lr(w_opt, lr)
        losses = []
        shuffle = seeded_rng(cfg.seed, "shuffle", "supervised", epoch)
        for batch in _epoch_batches(train_idx, cfg.batch_size, shuffle):
            x, y = _plain_batch(data, batch, size)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            w_opt.zero_grad(set_to_none=True)
            loss.backward()
            w_opt.step()
            losses.append(float(loss.detach()))
        if metrics is not None:
            metrics.append(metrics_row(epoch, "supervised", float(np.mean(losses)), lr, None))
    return model
