"""Instance-discrimination objective: paired augmentation, projection, NT-Xent."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .errors import DomainError, StructureError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation chain settings for paired-view generation.

    Jitter strengths follow the usual contrastive recipe at strength 0.5
    (0.8*s for brightness/contrast/saturation, 0.2*s for hue, applied with
    probability 0.8).  Grayscale and blur stay off by default; at 32x32
    inputs blur destroys most of the instance signal.
    """

    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.0
    blur_prob: float = 0.0
    output_size: int = 32

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise DomainError(f"crop_scale must be a sub-interval of (0, 1], got {self.crop_scale}")
        for name in ("hflip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not (0 <= p <= 1):
                raise DomainError(f"{name} must lie in [0, 1], got {p}")
        if not (0 <= self.hue <= 0.5):
            raise DomainError(f"hue strength must lie in [0, 0.5], got {self.hue}")
        if self.output_size < 1:
            raise DomainError("output_size must be positive")

    @classmethod
    def identity(cls, output_size: int) -> "AugmentConfig":
        """A degenerate chain that center-resizes and nothing else."""
        return cls(
            crop_scale=(1.0, 1.0),
            crop_ratio=(1.0, 1.0),
            hflip_prob=0.0,
            jitter_prob=0.0,
            output_size=output_size,
        )


def _sample_crop(rng: np.random.Generator, height: int, width: int, cfg: AugmentConfig):
    """Area/aspect crop sampling with a center-crop fallback after 10 tries."""
    area = height * width
    log_lo, log_hi = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def _augment_once(image: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    _, height, width = image.shape
    top, left, h, w = _sample_crop(rng, height, width, cfg)
    out = TF.resized_crop(
        image, top, left, h, w, [cfg.output_size, cfg.output_size],
        interpolation=InterpolationMode.BILINEAR, antialias=True,
    )
    if rng.random() < cfg.hflip_prob:
        out = TF.hflip(out)
    if cfg.jitter_prob > 0 and rng.random() < cfg.jitter_prob:
        for idx in rng.permutation(4):
            if idx == 0 and cfg.brightness > 0:
                out = TF.adjust_brightness(out, rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness))
            elif idx == 1 and cfg.contrast > 0:
                out = TF.adjust_contrast(out, rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast))
            elif idx == 2 and cfg.saturation > 0:
                out = TF.adjust_saturation(out, rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation))
            elif idx == 3 and cfg.hue > 0:
                out = TF.adjust_hue(out, rng.uniform(-cfg.hue, cfg.hue))
    if cfg.grayscale_prob > 0 and rng.random() < cfg.grayscale_prob:
        out = TF.rgb_to_grayscale(out, num_output_channels=out.shape[0])
    if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        kernel = max(3, (cfg.output_size // 10) * 2 + 1)
        out = TF.gaussian_blur(out, kernel, [float(rng.uniform(0.1, 2.0))])
    return out.clamp(0.0, 1.0)


def augment_pair(
    image: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independent draws of the augmentation chain on one image.

    Deterministic given the generator state; callers key the stream by
    (epoch, dataset index) so worker scheduling never changes results.
    """
    if image.ndim != 3:
        raise StructureError(f"expected a CHW image tensor, got shape {tuple(image.shape)}")
    if image.shape[1] < 1 or image.shape[2] < 1:
        raise DomainError("degenerate image with zero area")
    return _augment_once(image, cfg, rng), _augment_once(image, cfg, rng)


@dataclass(frozen=True)
class ProjectionHeadSpec:
    """Two-layer MLP mapping backbone features to the contrastive space."""

    hidden_dim: int = 2048
    out_dim: int = 128

    def __post_init__(self):
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise DomainError("projection dimensions must be positive")


class ProjectionHead(nn.Module):
    """features -> hidden (ReLU) -> out, rows L2-normalized."""

    def __init__(self, in_dim: int, spec: ProjectionHeadSpec = ProjectionHeadSpec()):
        super().__init__()
        self.in_dim = in_dim
        self.spec = spec
        self.fc1 = nn.Linear(in_dim, spec.hidden_dim)
        self.fc2 = nn.Linear(spec.hidden_dim, spec.out_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise StructureError(
                f"expected N x {self.in_dim} features, got shape {tuple(features.shape)}"
            )
        z = self.fc2(F.relu(self.fc1(features)))
        return normalize_rows(z)


def normalize_rows(z: torch.Tensor) -> torch.Tensor:
    """L2-normalize rows; an exactly-zero row maps to the first basis vector."""
    norms = z.norm(dim=1, keepdim=True)
    zero_rows = norms.squeeze(1) == 0
    if bool(zero_rows.any()):
        logger.warning("normalizing %d zero embedding row(s) to the first basis vector", int(zero_rows.sum()))
        fallback = torch.zeros_like(z)
        fallback[:, 0] = 1.0
        z = torch.where(zero_rows.unsqueeze(1), fallback, z)
        norms = z.norm(dim=1, keepdim=True)
    return z / norms


@dataclass
class EmbeddingBatch:
    """Paired projections entering the contrastive loss.

    Row 2i is the partner of row 2i+1.  Rows are expected unit-norm (the
    projection head guarantees this); the loss re-normalizes internally so
    cosine similarities stay exact under small drift.
    """

    z: torch.Tensor
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if self.z.ndim != 2:
            raise StructureError(f"expected a 2N x D matrix, got shape {tuple(self.z.shape)}")
        rows = self.z.shape[0]
        if rows % 2 != 0 or rows < 4:
            raise DomainError(f"need at least 2 pairs (4 rows, even), got {rows} rows")

    @property
    def num_pairs(self) -> int:
        return self.z.shape[0] // 2


def nt_xent(batch: EmbeddingBatch) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over all 2N anchors.

    For each anchor the positive is its partner view; the denominator runs
    over every other row (the positive plus 2N-2 negatives).  Uses log-sum-exp
    with max subtraction for stability.  Differentiable w.r.t. ``batch.z``.
    """
    z = normalize_rows(batch.z)
    n2 = z.shape[0]
    sim = z @ z.T
    logits = sim / batch.temperature
    eye = torch.eye(n2, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    pair = torch.arange(n2, device=z.device) ^ 1
    positive = logits[torch.arange(n2, device=z.device), pair]
    return (torch.logsumexp(logits, dim=1) - positive).mean()


def nt_xent_value(z: torch.Tensor, temperature: float = 0.1) -> float:
    """Convenience: the loss as a plain float, without gradient tracking."""
    with torch.no_grad():
        return float(nt_xent(EmbeddingBatch(z=z, temperature=temperature)))
