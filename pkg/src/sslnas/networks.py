"""Concrete trainable networks built from discrete architecture specs."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import StructureError
from .space import (
    ArchitectureSpec,
    BOTTLENECK_EXPANSION,
    FAMILY_MOBILENET,
    FAMILY_RESNET,
    FAMILY_SEARCHED,
    KIND_BASIC,
    KIND_ZERO,
    MOBILENET_FIRST_BLOCK_CHANNELS,
    MOBILENET_HEAD_CHANNELS,
    MOBILENET_STAGE_CHANNELS,
    MOBILENET_STAGE_STRIDES,
    MOBILENET_STEM_CHANNELS,
    RESNET_STAGE_CHANNELS,
    RESNET_STAGE_STRIDES,
    RESNET_STEM_CHANNELS,
    enumerate_cells,
    round_channels,
)
from .supernet import MBConvOp


class MBConvBlock(nn.Module):
    """MBConv with a residual connection where shapes permit."""

    def __init__(self, cin: int, cout: int, stride: int, kernel: int, expansion: int):
        super().__init__()
        self.op = MBConvOp(cin, cout, stride, kernel, expansion)
        self.use_res = stride == 1 and cin == cout

    def forward(self, x):
        y = self.op(x)
        return x + y if self.use_res else y


class SearchedBackbone(nn.Module):
    """Stem plus the chosen op per cell; zero cells vanish entirely."""

    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        if arch.family != FAMILY_SEARCHED:
            raise StructureError(f"expected a Searched-family spec, got {arch.family}")
        space = arch.space()
        stem_out = space.stem_out
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_out, 3, 2, 1, bias=False),
            nn.BatchNorm2d(stem_out),
            nn.ReLU6(inplace=True),
        )
        blocks = []
        for info, cell in zip(enumerate_cells(space), arch.cells):
            if cell.op.kind == KIND_ZERO:
                blocks.append(nn.Identity())
            else:
                blocks.append(
                    MBConvBlock(info.in_channels, info.out_channels, info.stride, cell.op.kernel, cell.op.expansion)
                )
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = space.scaled_channels[-1]

    def forward(self, x):
        out = self.blocks(self.stem(x))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, planes: int, stride: int, groups: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, planes, 3, stride, 1, groups=groups, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, groups=groups, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or cin != planes:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        identity = self.downsample(x) if self.downsample is not None else x
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class Bottleneck(nn.Module):
    def __init__(self, cin: int, planes: int, stride: int, groups: int):
        super().__init__()
        cout = planes * BOTTLENECK_EXPANSION
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, groups=groups, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        identity = self.downsample(x) if self.downsample is not None else x
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = F.relu(self.bn2(self.conv2(out)), inplace=True)
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity, inplace=True)


class ResNetBackbone(nn.Module):
    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        if arch.family != FAMILY_RESNET:
            raise StructureError(f"expected a ResNetLike spec, got {arch.family}")
        w = arch.width_multiplier
        groups = arch.extras.get("groups", 1)
        kind = arch.cells[0].op.kind
        block_cls = BasicBlock if kind == KIND_BASIC else Bottleneck
        stem_out = round_channels(RESNET_STEM_CHANNELS * w)
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_out, 7, 2, 3, bias=False),
            nn.BatchNorm2d(stem_out),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        planes = tuple(round_channels(c * w) for c in RESNET_STAGE_CHANNELS)
        blocks = []
        cin = stem_out
        prev_stage = -1
        for cell in arch.cells:
            p = planes[cell.stage]
            stride = RESNET_STAGE_STRIDES[cell.stage] if cell.stage != prev_stage else 1
            blocks.append(block_cls(cin, p, stride, groups))
            cin = p if kind == KIND_BASIC else p * BOTTLENECK_EXPANSION
            prev_stage = cell.stage
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = cin

    def forward(self, x):
        out = self.blocks(self.stem(x))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class MobileNetBackbone(nn.Module):
    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        if arch.family != FAMILY_MOBILENET:
            raise StructureError(f"expected a MobileNetLike spec, got {arch.family}")
        w = arch.width_multiplier
        stem_out = round_channels(MOBILENET_STEM_CHANNELS * w)
        first_out = round_channels(MOBILENET_FIRST_BLOCK_CHANNELS * w)
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_out, 3, 2, 1, bias=False),
            nn.BatchNorm2d(stem_out),
            nn.ReLU6(inplace=True),
            # Expansion-1 entry block: depthwise then project.
            nn.Conv2d(stem_out, stem_out, 3, 1, 1, groups=stem_out, bias=False),
            nn.BatchNorm2d(stem_out),
            nn.ReLU6(inplace=True),
            nn.Conv2d(stem_out, first_out, 1, bias=False),
            nn.BatchNorm2d(first_out),
        )
        channels = tuple(round_channels(c * w) for c in MOBILENET_STAGE_CHANNELS)
        blocks = []
        cin = first_out
        prev_stage = -1
        for cell in arch.cells:
            cout = channels[cell.stage]
            stride = MOBILENET_STAGE_STRIDES[cell.stage] if cell.stage != prev_stage else 1
            blocks.append(MBConvBlock(cin, cout, stride, 3, 6))
            cin = cout
            prev_stage = cell.stage
        self.blocks = nn.Sequential(*blocks)
        head_out = round_channels(MOBILENET_HEAD_CHANNELS * max(1.0, w))
        self.head = nn.Sequential(
            nn.Conv2d(cin, head_out, 1, bias=False),
            nn.BatchNorm2d(head_out),
            nn.ReLU6(inplace=True),
        )
        self.feature_dim = head_out

    def forward(self, x):
        out = self.head(self.blocks(self.stem(x)))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


def build_backbone(arch: ArchitectureSpec, dtype: torch.dtype = torch.float64) -> nn.Module:
    """Instantiate the feature extractor a spec describes.

    The module exposes ``feature_dim``; task heads (projection, probes,
    classifiers) are attached by callers.
    """
    if arch.family == FAMILY_SEARCHED:
        net = SearchedBackbone(arch)
    elif arch.family == FAMILY_RESNET:
        net = ResNetBackbone(arch)
    else:
        net = MobileNetBackbone(arch)
    return net.to(dtype)
