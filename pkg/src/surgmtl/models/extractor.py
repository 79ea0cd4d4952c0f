from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..curriculum import LoGKernel, apply_curriculum, log_kernel


class CurriculumFilter(nn.Module):
    """Holds the current LoG kernel for one sub-module; None means pass-through."""

    def __init__(self, radius: int):
        super().__init__()
        self.radius = int(radius)
        self.kernel: Optional[LoGKernel] = None

    @property
    def sigma(self) -> Optional[float]:
        return None if self.kernel is None else self.kernel.sigma

    def set_sigma(self, sigma: Optional[float]) -> None:
        self.kernel = None if sigma is None else log_kernel(sigma, self.radius)

    def set_kernel(self, kernel: Optional[LoGKernel]) -> None:
        if kernel is not None and kernel.radius != self.radius:
            raise ValueError(f"kernel radius {kernel.radius} != filter radius {self.radius}")
        self.kernel = kernel

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_curriculum(x, self.kernel)


class FeatureExtractor(nn.Module):
    """Three conv stages; the curriculum filter sits after each stage's convolution.

    Stages 1 and 2 halve the resolution with 2x2 average pooling, so a 32x32
    crop yields a C x 8 x 8 map.
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (16, 32, 64),
                 norm_groups: int = 4, curriculum_radius: int = 3):
        super().__init__()
        self.in_channels = in_channels
        cins = (in_channels, *channels[:-1])
        self.convs = nn.ModuleList(nn.Conv2d(ci, co, 3, padding=1) for ci, co in zip(cins, channels))
        self.norms = nn.ModuleList(nn.GroupNorm(norm_groups, co) for co in channels)
        self.curriculum = CurriculumFilter(curriculum_radius)
        self.out_dim = channels[-1]

    def feature_maps(self, crops: torch.Tensor) -> torch.Tensor:
        if crops.dim() != 4 or crops.shape[1] != self.in_channels:
            raise ValueError(f"expected N x {self.in_channels} x h x w crops, got {tuple(crops.shape)}")
        x = crops
        last = len(self.convs) - 1
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = F.relu(norm(self.curriculum(conv(x))))
            if i < last:
                x = F.avg_pool2d(x, 2)
        return x

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        return self.feature_maps(crops).mean(dim=(2, 3))


class HeadProjection(nn.Module):
    """Task-head input projection on shared maps: 1x1 conv, curriculum, pool."""

    def __init__(self, in_dim: int, out_dim: int, norm_groups: int = 4, curriculum_radius: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, out_dim, 1)
        self.norm = nn.GroupNorm(norm_groups, out_dim)
        self.curriculum = CurriculumFilter(curriculum_radius)

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        return F.relu(self.norm(self.curriculum(self.conv(maps)))).mean(dim=(2, 3))


class ClassifierHead(nn.Module):
    """Affine K x D classifier whose row count can grow as classes arrive."""

    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, in_dim))
        self.bias = nn.Parameter(torch.zeros(n_classes))
        nn.init.normal_(self.weight, std=in_dim ** -0.5)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.linear(features, self.weight, self.bias)

    @torch.no_grad()
    def expand(self, n_new: int, std: float, generator: torch.Generator) -> None:
        if n_new <= 0:
            raise ValueError("n_new must be >= 1")
        new_w = torch.randn(n_new, self.weight.shape[1], generator=generator, dtype=torch.float64)
        new_w = (new_w * std).to(self.weight.dtype)
        requires = self.weight.requires_grad
        self.weight = nn.Parameter(torch.cat([self.weight.data, new_w]), requires_grad=requires)
        self.bias = nn.Parameter(torch.cat([self.bias.data, self.bias.new_zeros(n_new)]),
                                 requires_grad=requires)
