"""Laplacian-of-Gaussian curriculum smoothing for convolutional feature maps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F


def log_value(x: np.ndarray | float, y: np.ndarray | float, sigma: float) -> np.ndarray:
    """Continuous LoG response at offset (x, y), before any discretisation fix."""
    r2 = np.asarray(x, dtype=np.float64) ** 2 + np.asarray(y, dtype=np.float64) ** 2
    s2 = 2.0 * sigma * sigma
    return -(1.0 / (math.pi * sigma**4)) * (1.0 - r2 / s2) * np.exp(-r2 / s2)


@dataclass(frozen=True, eq=False)
class LoGKernel:
    sigma: float
    radius: int
    weights: np.ndarray

    @property
    def width(self) -> int:
        return 2 * self.radius + 1


def log_kernel(sigma: float, radius: int) -> LoGKernel:
    """Sample the LoG on the integer grid [-radius, radius]^2 and remove the mean.

    The mean subtraction makes the kernel sum to zero, so it annihilates
    constant regions exactly (the sampled continuous LoG does not).
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if int(radius) != radius or radius < 1:
        raise ValueError(f"radius must be an integer >= 1, got {radius}")
    radius = int(radius)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(offsets, offsets, indexing="ij")
    raw = log_value(xx, yy, sigma)
    weights = raw - raw.mean()
    weights.setflags(write=False)
    return LoGKernel(sigma=float(sigma), radius=radius, weights=weights)


@dataclass(frozen=True)
class CurriculumSchedule:
    sigma0: float = 1.0
    decay_factor: float = 0.9
    interval_epochs: int = 5
    sigma_min: float = 0.4
    radius: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.sigma0 > 0 or not self.sigma_min > 0:
            raise ValueError("sigma0 and sigma_min must be positive")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.interval_epochs < 1:
            raise ValueError("interval_epochs must be >= 1")
        if self.sigma0 < self.sigma_min:
            raise ValueError("sigma0 must be >= sigma_min")
        if self.radius is not None and self.radius < 1:
            raise ValueError("radius must be >= 1")

    @property
    def kernel_radius(self) -> int:
        # Fixed for the whole schedule so feature-map shapes never change.
        return self.radius if self.radius is not None else int(math.ceil(3 * self.sigma0))


def schedule_sigma(s: CurriculumSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(s.sigma_min, s.sigma0 * s.decay_factor ** (epoch // s.interval_epochs))


def curriculum_active(s: CurriculumSchedule, epoch: int) -> bool:
    return schedule_sigma(s, epoch) > s.sigma_min


def kernel_for_epoch(s: CurriculumSchedule, epoch: int) -> Optional[LoGKernel]:
    """Kernel to use at ``epoch``, or None once the curriculum has ended."""
    if not curriculum_active(s, epoch):
        return None
    return log_kernel(schedule_sigma(s, epoch), s.kernel_radius)


def apply_curriculum(feature_map: torch.Tensor, kernel: Optional[LoGKernel]) -> torch.Tensor:
    """Depthwise zero-padded 2-D filtering of an N x C x H x W map.

    ``kernel=None`` is the identity mode and returns the input object untouched.
    """
    if kernel is None:
        return feature_map
    if feature_map.dim() != 4:
        raise ValueError("feature_map must be N x C x H x W")
    _, c, h, w = feature_map.shape
    if h < kernel.width or w < kernel.width:
        raise ValueError(
            f"feature map {h}x{w} is smaller than the {kernel.width}x{kernel.width} kernel"
        )
    weight = torch.tensor(kernel.weights, dtype=feature_map.dtype, device=feature_map.device)
    weight = weight.expand(c, 1, kernel.width, kernel.width)
    # conv2d is a cross-correlation; the kernel is point-symmetric so it equals convolution.
    return F.conv2d(feature_map, weight, padding=kernel.radius, groups=c)
