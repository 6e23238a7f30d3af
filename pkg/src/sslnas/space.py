"""Search space, discrete architectures, variant samplers, and parameter accounting.

The searchable backbone is a stack of mobile inverted bottleneck (MBConv)
cells arranged in stages; every cell picks one candidate operation.  Two
handcrafted families (ResNet-like, MobileNet-like) share the same
``ArchitectureSpec`` container so the study tooling can treat all model
variants uniformly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DomainError, ParseError, StructureError

SCHEMA_VERSION = 1

KIND_MBCONV = "MBConv"
KIND_ZERO = "Zero"
KIND_BASIC = "Basic"
KIND_BOTTLENECK = "Bottleneck"

FAMILY_SEARCHED = "Searched"
FAMILY_RESNET = "ResNetLike"
FAMILY_MOBILENET = "MobileNetLike"

MBCONV_KERNELS = (3, 5, 7)
MBCONV_EXPANSIONS = (3, 6)

DEFAULT_BASE_CHANNELS = (24, 40, 80, 96, 192, 320)
DEFAULT_CELLS_PER_STAGE = (4, 4, 4, 4, 4, 1)
DEFAULT_DOWNSAMPLES = (True, True, True, False, True, False)
DEFAULT_STEM_CHANNELS = 32

RESNET_STAGE_CHANNELS = (64, 128, 256, 512)
RESNET_STAGE_STRIDES = (1, 2, 2, 2)
RESNET_STEM_CHANNELS = 64
BOTTLENECK_EXPANSION = 4

MOBILENET_STAGE_CHANNELS = (24, 32, 64, 96, 160, 320)
MOBILENET_STAGE_STRIDES = (2, 2, 2, 1, 2, 1)
MOBILENET_STEM_CHANNELS = 32
MOBILENET_FIRST_BLOCK_CHANNELS = 16
MOBILENET_HEAD_CHANNELS = 1280
# Class count of the conventional classification head used for parameter
# accounting of the handcrafted MobileNet family (see params_breakdown).
MOBILENET_HEAD_CLASSES = 1000


def round_channels(value: float) -> int:
    """Nearest-integer channel rounding with a floor of 8."""
    return max(8, int(math.floor(value + 0.5)))


@dataclass(frozen=True)
class CandidateOp:
    """One selectable cell operation: an MBConv variant or the zero op."""

    kind: str
    kernel: int | None = None
    expansion: int | None = None

    def __post_init__(self):
        if self.kind == KIND_ZERO:
            if self.kernel is not None or self.expansion is not None:
                raise StructureError("zero op carries no kernel/expansion")
        elif self.kind == KIND_MBCONV:
            if self.kernel not in MBCONV_KERNELS:
                raise StructureError(f"MBConv kernel must be one of {MBCONV_KERNELS}, got {self.kernel}")
            if self.expansion not in MBCONV_EXPANSIONS:
                raise StructureError(f"MBConv expansion must be one of {MBCONV_EXPANSIONS}, got {self.expansion}")
        else:
            raise StructureError(f"unknown candidate op kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == KIND_ZERO:
            return "Zero"
        return f"MB{self.expansion} {self.kernel}x{self.kernel}"


@dataclass(frozen=True)
class BlockOp:
    """Family-specific block descriptor for handcrafted variants."""

    kind: str

    def __post_init__(self):
        if self.kind not in (KIND_BASIC, KIND_BOTTLENECK):
            raise StructureError(f"unknown block kind {self.kind!r}")

    def label(self) -> str:
        return self.kind


ZERO_OP = CandidateOp(KIND_ZERO)
# Canonical candidate order: kernels ascending, expansion ascending, zero last.
MBCONV_CANDIDATES = tuple(
    CandidateOp(KIND_MBCONV, kernel=k, expansion=e) for k in MBCONV_KERNELS for e in MBCONV_EXPANSIONS
)


@dataclass(frozen=True)
class StageSpec:
    """A run of cells sharing one output width."""

    num_cells: int
    out_channels: int
    downsamples: bool

    def __post_init__(self):
        if self.num_cells < 1:
            raise StructureError("stage needs at least one cell")
        if self.out_channels <= 0:
            raise StructureError("stage channels must be positive")


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Supernet layout: stem descriptor plus ordered stages.

    ``build_default_space`` produces the canonical 6-stage layout; smaller
    layouts are permitted for micro-scale experiments and tests, which may
    also relax ``channel_floor`` below the default 8.
    """

    stages: tuple[StageSpec, ...]
    width_multiplier: float
    stem_channels: int = DEFAULT_STEM_CHANNELS
    channel_floor: int = 8

    def __post_init__(self):
        if not self.stages:
            raise StructureError("search space needs at least one stage")
        if not (0 < self.width_multiplier <= 4):
            raise DomainError(f"width multiplier must lie in (0, 4], got {self.width_multiplier}")
        if self.stem_channels <= 0:
            raise StructureError("stem channels must be positive")
        if self.channel_floor < 1:
            raise StructureError("channel floor must be at least 1")

    def _scale(self, base: int) -> int:
        return max(self.channel_floor, int(math.floor(base * self.width_multiplier + 0.5)))

    @property
    def base_channels(self) -> tuple[int, ...]:
        return tuple(s.out_channels for s in self.stages)

    @property
    def scaled_channels(self) -> tuple[int, ...]:
        return tuple(self._scale(c) for c in self.base_channels)

    @property
    def stem_out(self) -> int:
        return self._scale(self.stem_channels)

    @property
    def total_cells(self) -> int:
        return sum(s.num_cells for s in self.stages)

    @property
    def num_downsamples(self) -> int:
        # The stem always strides by 2, in addition to any downsampling stages.
        return 1 + sum(1 for s in self.stages if s.downsamples)


def build_default_space(width_multiplier: float) -> SearchSpaceSpec:
    """Canonical layout: 6 stages, cells (4,4,4,4,4,1), stride 2 entering
    stages 1, 2, 3 and 5 (1-indexed), base widths 24..320."""
    if not isinstance(width_multiplier, (int, float)) or not (0 < width_multiplier <= 4):
        raise DomainError(f"width multiplier must lie in (0, 4], got {width_multiplier!r}")
    stages = tuple(
        StageSpec(num_cells=n, out_channels=c, downsamples=d)
        for n, c, d in zip(DEFAULT_CELLS_PER_STAGE, DEFAULT_BASE_CHANNELS, DEFAULT_DOWNSAMPLES)
    )
    return SearchSpaceSpec(stages=stages, width_multiplier=float(width_multiplier))


@dataclass(frozen=True)
class CellInfo:
    """Resolved placement of one cell inside a space."""

    index: int
    stage: int
    pos_in_stage: int
    in_channels: int
    out_channels: int
    stride: int

    @property
    def allows_zero(self) -> bool:
        # Zero ops are excluded at stage-initial cells so every derived
        # network keeps one shape-changing op per stage.
        return self.pos_in_stage > 0


def enumerate_cells(space: SearchSpaceSpec) -> list[CellInfo]:
    """Trace channels/strides through the space, one record per cell."""
    cells = []
    cin = space.stem_out
    index = 0
    for stage_idx, (stage, cout) in enumerate(zip(space.stages, space.scaled_channels)):
        for pos in range(stage.num_cells):
            stride = 2 if (stage.downsamples and pos == 0) else 1
            cells.append(
                CellInfo(
                    index=index,
                    stage=stage_idx,
                    pos_in_stage=pos,
                    in_channels=cin,
                    out_channels=cout,
                    stride=stride,
                )
            )
            cin = cout
            index += 1
    return cells


def candidate_set(space: SearchSpaceSpec, cell_index: int) -> list[CandidateOp]:
    """Candidates for one cell: six MBConv variants, plus the zero op at
    non-initial cells (stride 1, channel preserving)."""
    cells = enumerate_cells(space)
    if not (0 <= cell_index < len(cells)):
        raise DomainError(f"cell index {cell_index} out of range [0, {len(cells)})")
    info = cells[cell_index]
    candidates = list(MBCONV_CANDIDATES)
    if info.allows_zero:
        candidates.append(ZERO_OP)
    return candidates


@dataclass(frozen=True)
class Cell:
    """One placed operation of a discrete architecture."""

    stage: int
    op: CandidateOp | BlockOp


@dataclass(frozen=True)
class ArchitectureSpec:
    """A discrete network description for any of the three families.

    Treat instances as immutable, including the ``extras`` mapping.
    """

    family: str
    width_multiplier: float
    cells: tuple[Cell, ...]
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise StructureError("width multiplier must be positive")
        if not self.cells:
            raise StructureError("architecture needs at least one cell")
        if self.family == FAMILY_SEARCHED:
            self._validate_searched()
        elif self.family == FAMILY_RESNET:
            self._validate_resnet()
        elif self.family == FAMILY_MOBILENET:
            self._validate_mobilenet()
        else:
            raise StructureError(f"unknown family {self.family!r}")

    # -- family validation -------------------------------------------------

    def _validate_searched(self):
        space = self.space()
        infos = enumerate_cells(space)
        if len(infos) != len(self.cells):
            raise StructureError(
                f"cell list length {len(self.cells)} does not match space layout ({len(infos)} cells)"
            )
        for info, cell in zip(infos, self.cells):
            if cell.stage != info.stage:
                raise StructureError(f"cell {info.index} tagged stage {cell.stage}, layout says {info.stage}")
            if not isinstance(cell.op, CandidateOp):
                raise StructureError(f"cell {info.index} must hold a candidate op")
            if cell.op.kind == KIND_ZERO and not info.allows_zero:
                raise StructureError(f"zero op not permitted at stage-initial cell {info.index}")

    def _validate_resnet(self):
        stages = sorted({c.stage for c in self.cells})
        if stages != list(range(4)):
            raise StructureError("ResNet-like variants span exactly 4 stages")
        kinds = {c.op.kind for c in self.cells}
        if len(kinds) != 1 or not kinds <= {KIND_BASIC, KIND_BOTTLENECK}:
            raise StructureError("ResNet-like variants use one block kind throughout")
        groups = self.extras.get("groups", 1)
        if not isinstance(groups, int) or groups < 1:
            raise StructureError("groups must be a positive integer")
        for planes in self._resnet_planes():
            if planes % groups != 0:
                raise StructureError(f"groups={groups} does not divide stage width {planes}")
        self._require_contiguous_stages(4)

    def _validate_mobilenet(self):
        stages = sorted({c.stage for c in self.cells})
        if stages != list(range(6)):
            raise StructureError("MobileNet-like variants span exactly 6 stages")
        for i, cell in enumerate(self.cells):
            op = cell.op
            if not isinstance(op, CandidateOp) or op.kind != KIND_MBCONV or op.kernel != 3 or op.expansion != 6:
                raise StructureError(f"cell {i}: MobileNet-like blocks are MBConv k3 e6")
        self._require_contiguous_stages(6)

    def _require_contiguous_stages(self, n_stages: int):
        last = 0
        for i, cell in enumerate(self.cells):
            if cell.stage < last:
                raise StructureError(f"cell {i} out of stage order")
            last = cell.stage

    # -- derived views ------------------------------------------------------

    def space(self) -> SearchSpaceSpec:
        """Reconstruct the search space a Searched-family spec was drawn from."""
        if self.family != FAMILY_SEARCHED:
            raise StructureError("only Searched-family specs carry a search space")
        raw = self.extras.get("space")
        if raw is None:
            return build_default_space(self.width_multiplier)
        return space_from_json(raw, self.width_multiplier)

    def blocks_per_stage(self) -> tuple[int, ...]:
        n = max(c.stage for c in self.cells) + 1
        counts = [0] * n
        for c in self.cells:
            counts[c.stage] += 1
        return tuple(counts)

    def _resnet_planes(self) -> tuple[int, ...]:
        return tuple(round_channels(c * self.width_multiplier) for c in RESNET_STAGE_CHANNELS)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamsBreakdown:
    """Per-component trainable-parameter counts; total is their exact sum."""

    stem: int
    cells: tuple[int, ...]
    head: int

    @property
    def total(self) -> int:
        return self.stem + sum(self.cells) + self.head


def conv_params(cin: int, cout: int, kernel: int, groups: int = 1) -> int:
    return (cin // groups) * cout * kernel * kernel


def norm_params(channels: int) -> int:
    return 2 * channels


def mbconv_params(cin: int, cout: int, kernel: int, expansion: int) -> int:
    """Expand 1x1 + depthwise kxk + project 1x1, each normalized."""
    hidden = expansion * cin
    total = conv_params(cin, hidden, 1) + norm_params(hidden)
    total += conv_params(hidden, hidden, kernel, groups=hidden) + norm_params(hidden)
    total += conv_params(hidden, cout, 1) + norm_params(cout)
    return total


def _searched_breakdown(arch: ArchitectureSpec) -> ParamsBreakdown:
    space = arch.space()
    infos = enumerate_cells(space)
    stem = conv_params(3, space.stem_out, 3) + norm_params(space.stem_out)
    cells = []
    for info, cell in zip(infos, arch.cells):
        op = cell.op
        if op.kind == KIND_ZERO:
            cells.append(0)
        else:
            cells.append(mbconv_params(info.in_channels, info.out_channels, op.kernel, op.expansion))
    return ParamsBreakdown(stem=stem, cells=tuple(cells), head=0)


def _resnet_block_params(kind: str, cin: int, planes: int, stride: int, groups: int) -> int:
    if kind == KIND_BASIC:
        cout = planes
        total = conv_params(cin, planes, 3, groups) + norm_params(planes)
        total += conv_params(planes, planes, 3, groups) + norm_params(planes)
    else:
        cout = planes * BOTTLENECK_EXPANSION
        total = conv_params(cin, planes, 1) + norm_params(planes)
        total += conv_params(planes, planes, 3, groups) + norm_params(planes)
        total += conv_params(planes, cout, 1) + norm_params(cout)
    if stride != 1 or cin != cout:
        total += conv_params(cin, cout, 1) + norm_params(cout)
    return total


def _resnet_breakdown(arch: ArchitectureSpec) -> ParamsBreakdown:
    groups = arch.extras.get("groups", 1)
    planes = arch._resnet_planes()
    stem_out = round_channels(RESNET_STEM_CHANNELS * arch.width_multiplier)
    stem = conv_params(3, stem_out, 7) + norm_params(stem_out)
    cells = []
    cin = stem_out
    prev_stage = -1
    for cell in arch.cells:
        p = planes[cell.stage]
        stride = RESNET_STAGE_STRIDES[cell.stage] if cell.stage != prev_stage else 1
        cells.append(_resnet_block_params(cell.op.kind, cin, p, stride, groups))
        cin = p if cell.op.kind == KIND_BASIC else p * BOTTLENECK_EXPANSION
        prev_stage = cell.stage
    # Convolutional trunk only; the classification layer is not counted for
    # this family, matching its conventionally quoted size figures.
    return ParamsBreakdown(stem=stem, cells=tuple(cells), head=0)


def _mobilenet_breakdown(arch: ArchitectureSpec) -> ParamsBreakdown:
    w = arch.width_multiplier
    stem_out = round_channels(MOBILENET_STEM_CHANNELS * w)
    first_out = round_channels(MOBILENET_FIRST_BLOCK_CHANNELS * w)
    # Fixed entry: 3x3 stride-2 conv plus the expansion-1 bottleneck block.
    stem = conv_params(3, stem_out, 3) + norm_params(stem_out)
    stem += conv_params(stem_out, stem_out, 3, groups=stem_out) + norm_params(stem_out)
    stem += conv_params(stem_out, first_out, 1) + norm_params(first_out)

    channels = tuple(round_channels(c * w) for c in MOBILENET_STAGE_CHANNELS)
    cells = []
    cin = first_out
    for cell in arch.cells:
        cout = channels[cell.stage]
        cells.append(mbconv_params(cin, cout, 3, 6))
        cin = cout
    head_out = round_channels(MOBILENET_HEAD_CHANNELS * max(1.0, w))
    head = conv_params(cin, head_out, 1) + norm_params(head_out)
    # This family's conventionally quoted parameter figures include the
    # 1000-way classification layer, so the accounting keeps it.
    head += head_out * MOBILENET_HEAD_CLASSES + MOBILENET_HEAD_CLASSES
    return ParamsBreakdown(stem=stem, cells=tuple(cells), head=head)


def params_breakdown(arch: ArchitectureSpec) -> ParamsBreakdown:
    """Exact trainable-parameter counts (stem, per cell, head).

    Counts include normalization scale/shift.  SSL projection heads and
    task-specific probes are never counted.
    """
    if arch.family == FAMILY_SEARCHED:
        return _searched_breakdown(arch)
    if arch.family == FAMILY_RESNET:
        return _resnet_breakdown(arch)
    return _mobilenet_breakdown(arch)


def count_params(arch: ArchitectureSpec) -> int:
    return params_breakdown(arch).total


def ratio_from_breakdown(breakdown: ParamsBreakdown) -> float:
    """Top/bottom parameter ratio over the cell sequence.

    The cell list is split at ceil(M/2); the stem counts toward the bottom
    half and the head toward the top half.
    """
    m = len(breakdown.cells)
    if m < 2:
        raise DomainError("top/bottom ratio needs at least 2 cells")
    split = math.ceil(m / 2)
    bottom = breakdown.stem + sum(breakdown.cells[:split])
    top = sum(breakdown.cells[split:]) + breakdown.head
    if bottom == 0:
        raise DomainError("degenerate architecture: bottom half has no parameters")
    return top / bottom


def top_bottom_ratio(arch: ArchitectureSpec) -> float:
    return ratio_from_breakdown(params_breakdown(arch))


# ---------------------------------------------------------------------------
# canonical handcrafted variants and samplers
# ---------------------------------------------------------------------------


def _family_cells(blocks: Sequence[int], op_for_stage) -> tuple[Cell, ...]:
    return tuple(Cell(stage=s, op=op_for_stage(s)) for s, n in enumerate(blocks) for _ in range(n))


def make_resnet_variant(blocks: Sequence[int], kind: str, width: float = 1.0, groups: int = 1) -> ArchitectureSpec:
    return ArchitectureSpec(
        family=FAMILY_RESNET,
        width_multiplier=float(width),
        cells=_family_cells(blocks, lambda s: BlockOp(kind)),
        extras={"groups": int(groups)},
    )


def make_mobilenet_variant(blocks: Sequence[int], width: float = 1.0) -> ArchitectureSpec:
    return ArchitectureSpec(
        family=FAMILY_MOBILENET,
        width_multiplier=float(width),
        cells=_family_cells(blocks, lambda s: CandidateOp(KIND_MBCONV, kernel=3, expansion=6)),
    )


def canonical_resnet18() -> ArchitectureSpec:
    return make_resnet_variant((2, 2, 2, 2), KIND_BASIC)


def canonical_resnet50() -> ArchitectureSpec:
    return make_resnet_variant((3, 4, 6, 3), KIND_BOTTLENECK)


def canonical_mobilenet_v2() -> ArchitectureSpec:
    return make_mobilenet_variant((2, 3, 4, 3, 3, 1))


RESNET_SAMPLER_WIDTHS = (0.5, 0.75, 1.0, 1.5, 2.0)
MOBILENET_SAMPLER_WIDTHS = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)


def sample_resnet_variant(
    rng: np.random.Generator,
    *,
    blocks_range: tuple[int, int] = (1, 4),
    widths: Sequence[float] = RESNET_SAMPLER_WIDTHS,
    groups_choices: Sequence[int] = (1, 2, 4),
) -> ArchitectureSpec:
    """Draw a ResNet-like variant: blocks per stage, block kind, width, groups.

    Pure function of the generator state.  The ranges are a documented
    choice and configurable.
    """
    lo, hi = blocks_range
    blocks = [int(rng.integers(lo, hi + 1)) for _ in range(4)]
    kind = (KIND_BASIC, KIND_BOTTLENECK)[int(rng.integers(0, 2))]
    width = float(widths[int(rng.integers(0, len(widths)))])
    groups = int(groups_choices[int(rng.integers(0, len(groups_choices)))])
    return make_resnet_variant(blocks, kind, width, groups)


def sample_mobilenet_variant(
    rng: np.random.Generator,
    *,
    blocks_range: tuple[int, int] = (2, 4),
    widths: Sequence[float] = MOBILENET_SAMPLER_WIDTHS,
) -> ArchitectureSpec:
    """Draw a MobileNet-like variant: blocks per 6 stages and width."""
    lo, hi = blocks_range
    blocks = [int(rng.integers(lo, hi + 1)) for _ in range(6)]
    width = float(widths[int(rng.integers(0, len(widths)))])
    return make_mobilenet_variant(blocks, width)


def arch_from_choices(space: SearchSpaceSpec, ops: Sequence[CandidateOp]) -> ArchitectureSpec:
    """Build a Searched-family spec by assigning one candidate per cell."""
    infos = enumerate_cells(space)
    if len(ops) != len(infos):
        raise StructureError(f"expected {len(infos)} ops, got {len(ops)}")
    cells = tuple(Cell(stage=info.stage, op=op) for info, op in zip(infos, ops))
    return ArchitectureSpec(
        family=FAMILY_SEARCHED,
        width_multiplier=space.width_multiplier,
        cells=cells,
        extras={"space": space_to_json(space)},
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def space_to_json(space: SearchSpaceSpec) -> dict:
    return {
        "stem_channels": space.stem_channels,
        "channel_floor": space.channel_floor,
        "stages": [
            {"num_cells": s.num_cells, "out_channels": s.out_channels, "downsamples": s.downsamples}
            for s in space.stages
        ],
    }


def space_from_json(raw: dict, width_multiplier: float) -> SearchSpaceSpec:
    stages = tuple(
        StageSpec(num_cells=s["num_cells"], out_channels=s["out_channels"], downsamples=s["downsamples"])
        for s in raw["stages"]
    )
    return SearchSpaceSpec(
        stages=stages,
        width_multiplier=width_multiplier,
        stem_channels=raw["stem_channels"],
        channel_floor=raw.get("channel_floor", 8),
    )


def space_hash(space: SearchSpaceSpec) -> str:
    doc = dict(space_to_json(space), width_multiplier=space.width_multiplier)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _op_to_json(op: CandidateOp | BlockOp) -> dict:
    if isinstance(op, BlockOp):
        return {"kind": op.kind}
    if op.kind == KIND_ZERO:
        return {"kind": KIND_ZERO}
    return {"kind": KIND_MBCONV, "kernel": op.kernel, "expansion": op.expansion}


def serialize_arch(arch: ArchitectureSpec) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "family": arch.family,
        "width_multiplier": arch.width_multiplier,
        "cells": [{"stage": c.stage, "op": _op_to_json(c.op)} for c in arch.cells],
        "extras": arch.extras,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def _expect_key(obj: dict, key: str, path: str):
    if key not in obj:
        raise ParseError("missing required field", path=f"{path}.{key}" if path else key)
    return obj[key]


def _parse_op(raw: Any, path: str) -> CandidateOp | BlockOp:
    if not isinstance(raw, dict):
        raise ParseError("op must be an object", path=path)
    kind = _expect_key(raw, "kind", path)
    if kind in (KIND_BASIC, KIND_BOTTLENECK):
        return BlockOp(kind)
    if kind == KIND_ZERO:
        for k in ("kernel", "expansion"):
            if raw.get(k) is not None:
                raise ParseError("zero op carries no kernel/expansion", path=f"{path}.{k}")
        return ZERO_OP
    if kind == KIND_MBCONV:
        kernel = _expect_key(raw, "kernel", path)
        expansion = _expect_key(raw, "expansion", path)
        if kernel not in MBCONV_KERNELS:
            raise ParseError(f"expected one of {MBCONV_KERNELS}, got {kernel!r}", path=f"{path}.kernel")
        if expansion not in MBCONV_EXPANSIONS:
            raise ParseError(f"expected one of {MBCONV_EXPANSIONS}, got {expansion!r}", path=f"{path}.expansion")
        return CandidateOp(KIND_MBCONV, kernel=kernel, expansion=expansion)
    raise ParseError(f"unknown op kind {kind!r}", path=f"{path}.kind")


def parse_arch(text: str) -> ArchitectureSpec:
    """Parse a serialized architecture; failures name the offending field."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg} at position {e.pos}") from e
    if not isinstance(doc, dict):
        raise ParseError("document root must be an object")

    allowed = {"schema_version", "family", "width_multiplier", "cells", "extras"}
    for key in doc:
        if key not in allowed:
            raise ParseError("unknown field", path=key)

    version = _expect_key(doc, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema version {version!r}", path="schema_version")

    family = _expect_key(doc, "family", "")
    if family not in (FAMILY_SEARCHED, FAMILY_RESNET, FAMILY_MOBILENET):
        raise ParseError(f"unknown family {family!r}", path="family")

    width = _expect_key(doc, "width_multiplier", "")
    if not isinstance(width, (int, float)) or isinstance(width, bool) or width <= 0:
        raise ParseError(f"expected a positive number, got {width!r}", path="width_multiplier")

    raw_cells = _expect_key(doc, "cells", "")
    if not isinstance(raw_cells, list) or not raw_cells:
        raise ParseError("expected a non-empty array", path="cells")
    cells = []
    for i, raw in enumerate(raw_cells):
        path = f"cells[{i}]"
        if not isinstance(raw, dict):
            raise ParseError("cell must be an object", path=path)
        stage = _expect_key(raw, "stage", path)
        if not isinstance(stage, int) or isinstance(stage, bool) or stage < 0:
            raise ParseError(f"expected a non-negative integer, got {stage!r}", path=f"{path}.stage")
        op = _parse_op(_expect_key(raw, "op", path), f"{path}.op")
        cells.append(Cell(stage=stage, op=op))

    extras = doc.get("extras", {})
    if not isinstance(extras, dict):
        raise ParseError("expected an object", path="extras")

    try:
        return ArchitectureSpec(
            family=family, width_multiplier=float(width), cells=tuple(cells), extras=extras
        )
    except StructureError as e:
        raise ParseError(str(e), path="cells") from e
