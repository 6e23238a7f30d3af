"""Shared-weight supernet: mixed edges, gate sampling, and the alpha gradient.

Each searchable cell holds private modules (weights and normalization
statistics) for every candidate op plus a logit vector alpha over them.
A training step samples one candidate per cell and runs that subnet; the
alpha update pulls per-path sensitivities back through the softmax Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .contrastive import ProjectionHead, ProjectionHeadSpec
from .errors import DomainError, StructureError
from .rng import seeded_rng
from .space import (
    ArchitectureSpec,
    CandidateOp,
    CellInfo,
    KIND_ZERO,
    SearchSpaceSpec,
    arch_from_choices,
    candidate_set,
    enumerate_cells,
)


class MBConvOp(nn.Module):
    """Mobile inverted bottleneck: expand 1x1 -> depthwise kxk -> project 1x1.

    Pure op without a shortcut; the owning cell adds the residual where
    shapes permit.
    """

    def __init__(self, cin: int, cout: int, stride: int, kernel: int, expansion: int):
        super().__init__()
        hidden = expansion * cin
        self.block = nn.Sequential(
            nn.Conv2d(cin, hidden, 1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, hidden, kernel, stride, kernel // 2, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        )

    def forward(self, x):
        return self.block(x)


class SearchCell(nn.Module):
    """One searchable cell: private candidate modules plus optional shortcut.

    At shortcut cells (stride 1, channels preserved) the output is
    ``x + gate * op(x)`` and the zero candidate contributes nothing, making
    the cell an exact identity.  Elsewhere the chosen op output stands alone.
    """

    def __init__(self, info: CellInfo, candidates: Sequence[CandidateOp]):
        super().__init__()
        self.info = info
        self.candidates = tuple(candidates)
        self.has_shortcut = info.stride == 1 and info.in_channels == info.out_channels
        ops = []
        for op in self.candidates:
            if op.kind == KIND_ZERO:
                if not self.has_shortcut:
                    raise StructureError(f"zero candidate at cell {info.index} without a shortcut")
                ops.append(nn.Identity())
            else:
                ops.append(MBConvOp(info.in_channels, info.out_channels, info.stride, op.kernel, op.expansion))
        self.ops = nn.ModuleList(ops)

    def forward(self, x, choice: int, gate: torch.Tensor | None = None):
        op = self.candidates[choice]
        if op.kind == KIND_ZERO:
            return x
        y = self.ops[choice](x)
        if gate is not None:
            y = y * gate
        return x + y if self.has_shortcut else y


class SupernetNet(nn.Module):
    """Stem, searchable cells, pooled features, and the projection head."""

    def __init__(self, space: SearchSpaceSpec, candidates_per_cell: list[Sequence[CandidateOp]],
                 projection: ProjectionHeadSpec):
        super().__init__()
        stem_out = space.stem_out
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_out, 3, 2, 1, bias=False),
            nn.BatchNorm2d(stem_out),
            nn.ReLU6(inplace=True),
        )
        infos = enumerate_cells(space)
        self.cells = nn.ModuleList(SearchCell(info, cands) for info, cands in zip(infos, candidates_per_cell))
        self.alphas = nn.ParameterList(
            nn.Parameter(torch.zeros(len(cands)), requires_grad=True) for cands in candidates_per_cell
        )
        self.feature_dim = space.scaled_channels[-1]
        self.projection = ProjectionHead(self.feature_dim, projection)

    def features(self, x, choices: Sequence[int], gates: Sequence[torch.Tensor | None] | None = None):
        out = self.stem(x)
        for i, cell in enumerate(self.cells):
            gate = gates[i] if gates is not None else None
            out = cell(out, choices[i], gate)
        out = F.adaptive_avg_pool2d(out, 1)
        return out.flatten(1)

    def weight_parameters(self):
        alpha_ids = {id(p) for p in self.alphas}
        return [p for p in self.parameters() if id(p) not in alpha_ids]


@dataclass
class MixedEdge:
    """View of one searchable cell: its candidates and the alpha vector."""

    cell_index: int
    candidates: tuple[CandidateOp, ...]
    alpha: nn.Parameter


@dataclass
class SupernetState:
    """Search space, shared-weight network, mixed edges, and phase counters."""

    space: SearchSpaceSpec
    net: SupernetNet
    edges: list[MixedEdge]
    counters: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class GateSample:
    """One sampled subnet: chosen candidate per edge plus the probabilities used."""

    chosen: tuple[int, ...]
    probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        for i, (c, p) in enumerate(zip(self.chosen, self.probs)):
            if not (0 <= c < len(p)):
                raise StructureError(f"edge {i}: choice {c} out of range for {len(p)} candidates")
            if abs(float(p.sum()) - 1.0) > 1e-6:
                raise StructureError(f"edge {i}: probabilities sum to {float(p.sum())}, expected 1")


def init_supernet(
    space: SearchSpaceSpec,
    seed: int,
    *,
    projection: ProjectionHeadSpec = ProjectionHeadSpec(),
    candidates_fn: Callable[[SearchSpaceSpec, int], Sequence[CandidateOp]] | None = None,
    dtype: torch.dtype = torch.float64,
) -> SupernetState:
    """Build a supernet with zero alphas and fan-in-scaled random weights.

    Weight tensors are drawn from streams keyed by parameter name, so two
    calls with the same seed produce bit-identical states regardless of
    construction order.  ``candidates_fn`` may restrict the candidate list
    per cell (defaults to the full set).
    """
    fn = candidates_fn or candidate_set
    candidates_per_cell = [list(fn(space, i)) for i in range(space.total_cells)]
    for i, cands in enumerate(candidates_per_cell):
        if not cands:
            raise StructureError(f"cell {i} has an empty candidate list")
    net = SupernetNet(space, candidates_per_cell, projection)
    net.to(dtype)
    init_weights(net, seed)
    edges = [
        MixedEdge(cell_index=i, candidates=tuple(cands), alpha=net.alphas[i])
        for i, cands in enumerate(candidates_per_cell)
    ]
    return SupernetState(space=space, net=net, edges=edges, counters={})


def init_weights(net: nn.Module, seed: int) -> None:
    """He-normal convs, unit/zero norms, fan-in-scaled linear layers."""
    with torch.no_grad():
        for name, module in net.named_modules():
            if isinstance(module, nn.Conv2d):
                w = module.weight
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
                rng = seeded_rng(seed, "init", f"{name}.weight")
                w.copy_(torch.from_numpy(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(w.shape))))
            elif isinstance(module, (nn.BatchNorm2d, nn.BatchNorm1d)):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
            elif isinstance(module, nn.Linear):
                fan_in = module.weight.shape[1]
                rng = seeded_rng(seed, "init", f"{name}.weight")
                module.weight.copy_(
                    torch.from_numpy(rng.normal(0.0, math.sqrt(1.0 / fan_in), size=tuple(module.weight.shape)))
                )
                module.bias.fill_(0.0)


def path_probabilities(edge: MixedEdge) -> np.ndarray:
    """Softmax of the edge's alpha, stabilized by max subtraction."""
    alpha = edge.alpha.detach().cpu().numpy().astype(np.float64)
    if not np.all(np.isfinite(alpha)):
        raise DomainError(f"edge {edge.cell_index}: alpha contains non-finite entries")
    shifted = alpha - alpha.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def sample_gates(state: SupernetState, rng: np.random.Generator) -> GateSample:
    """Draw one candidate per edge from the current path probabilities."""
    chosen = []
    probs = []
    for edge in state.edges:
        p = path_probabilities(edge)
        chosen.append(int(rng.choice(len(p), p=p)))
        probs.append(p)
    return GateSample(chosen=tuple(chosen), probs=tuple(probs))


def _validate_batch(state: SupernetState, batch: torch.Tensor) -> None:
    if batch.ndim != 4:
        raise StructureError(f"expected an NCHW batch, got shape {tuple(batch.shape)}")
    if batch.shape[1] != 3:
        raise StructureError(f"stem expects 3 input channels, got {batch.shape[1]}")
    min_side = 2 ** (state.space.num_downsamples - 1)
    if batch.shape[2] < min_side or batch.shape[3] < min_side:
        raise StructureError(
            f"spatial size {batch.shape[2]}x{batch.shape[3]} too small; this space needs at least {min_side}"
        )


def forward_subnet(state: SupernetState, gates: GateSample, batch: torch.Tensor) -> torch.Tensor:
    """Run the sampled subnet: stem, chosen op per cell, global average pool.

    Returns N x C_final features, differentiable w.r.t. the chosen-path
    weights.  Zero-op cells pass their input through untouched.
    """
    _validate_batch(state, batch)
    if len(gates.chosen) != len(state.edges):
        raise StructureError(f"gate sample covers {len(gates.chosen)} edges, supernet has {len(state.edges)}")
    return state.net.features(batch, gates.chosen)


def forward_subnet_with_gates(
    state: SupernetState, gates: GateSample, batch: torch.Tensor
) -> tuple[torch.Tensor, list[torch.Tensor | None]]:
    """Forward pass with a unit gate scalar multiplying each chosen op output.

    The returned gate tensors expose per-path sensitivities: after a
    backward pass, ``gate.grad`` is the derivative of the loss w.r.t. a
    multiplicative gate on that edge's sampled path.  Zero-op choices have
    no gate (their path contributes nothing), reported as None.
    """
    _validate_batch(state, batch)
    dtype = batch.dtype
    gate_tensors: list[torch.Tensor | None] = []
    for edge, choice in zip(state.edges, gates.chosen):
        if edge.candidates[choice].kind == KIND_ZERO:
            gate_tensors.append(None)
        else:
            gate_tensors.append(torch.ones((), dtype=dtype, requires_grad=True))
    features = state.net.features(batch, gates.chosen, gate_tensors)
    return features, gate_tensors


def arch_gradient(probs: np.ndarray, gate_grads: np.ndarray) -> np.ndarray:
    """Pull per-path sensitivities back onto alpha through the softmax Jacobian.

    g_k = sum_j gate_grads_j * probs_j * (delta_jk - probs_k); rows of the
    Jacobian sum to zero, so the result always sums to zero exactly.
    """
    probs = np.asarray(probs, dtype=np.float64)
    gate_grads = np.asarray(gate_grads, dtype=np.float64)
    if probs.shape != gate_grads.shape or probs.ndim != 1:
        raise DomainError(f"shape mismatch: probs {probs.shape} vs gate grads {gate_grads.shape}")
    if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > 1e-6:
        raise DomainError("probs must form a probability distribution")
    weighted = probs * gate_grads
    return weighted - probs * weighted.sum()


def derive_architecture(state: SupernetState) -> ArchitectureSpec:
    """Freeze the search: per edge argmax of alpha (ties to the lowest index).

    Only the topology survives; learned weights are not copied.
    """
    ops = []
    for edge in state.edges:
        alpha = edge.alpha.detach().cpu().numpy()
        ops.append(edge.candidates[int(np.argmax(alpha))])
    return arch_from_choices(state.space, ops)
