"""Style statistics, style removal and the CUPI feature generator.

A feature map's style is its per-channel mean and (population) standard
deviation over spatial positions; what remains after removing it is treated
as semantic content. The generator re-styles CUPI features with transformed
statistics of the paired authorized features.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import ShapeError

STD_EPS = 1e-5


@dataclass
class StyleStats:
    mean: torch.Tensor  # (B, C)
    std: torch.Tensor  # (B, C), >= STD_EPS

    def detach(self) -> "StyleStats":
        return StyleStats(self.mean.detach(), self.std.detach())


def _check_map(f: torch.Tensor) -> None:
    if f.dim() != 4:
        raise ShapeError(f"feature map must be (B, C, H, W), got shape {tuple(f.shape)}")
    if f.shape[2] * f.shape[3] == 0:
        raise ShapeError("feature map has an empty spatial extent")


def channel_stats(f: torch.Tensor) -> StyleStats:
    _check_map(f)
    mean = f.mean(dim=(2, 3))
    var = f.var(dim=(2, 3), unbiased=False)
    # flooring the variance keeps the gradient finite for constant channels
    std = var.clamp_min(STD_EPS**2).sqrt()
    return StyleStats(mean, std)


def remove_style(f: torch.Tensor, stats: Optional[StyleStats] = None) -> torch.Tensor:
    stats = channel_stats(f) if stats is None else stats
    return (f - stats.mean[:, :, None, None]) / stats.std[:, :, None, None]


class ChannelMap(nn.Module):
    """Affine map acting on a ``(B, C)`` statistics matrix; identity at init."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.eye(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return s @ self.weight.T + self.bias


class GeneratorLevel(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.mu = ChannelMap(channels)
        self.sigma = ChannelMap(channels)

    def forward(self, f_s: torch.Tensor, f_i: torch.Tensor, detach_stats: bool = False) -> torch.Tensor:
        _check_map(f_s)
        _check_map(f_i)
        if f_s.shape[:2] != f_i.shape[:2]:
            raise ShapeError(
                f"authorized features {tuple(f_s.shape)} and CUPI features {tuple(f_i.shape)} "
                "must share batch and channel dimensions"
            )
        style = channel_stats(f_s)
        if detach_stats:
            style = style.detach()
        scale = self.sigma(style.std)[:, :, None, None]
        shift = self.mu(style.mean)[:, :, None, None]
        return remove_style(f_i) * scale + shift


class StyleGenerator(nn.Module):
    """One :class:`GeneratorLevel` per pyramid block."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.levels = nn.ModuleList(GeneratorLevel(c) for c in widths)

    def forward(self, level: int, f_s: torch.Tensor, f_i: torch.Tensor, detach_stats: bool = False):
        return self.levels[level](f_s, f_i, detach_stats)


def generator_forward(
    f_s: torch.Tensor, f_i: torch.Tensor, params: StyleGenerator, level: int, detach_stats: bool = False
) -> torch.Tensor:
    """Semantics of ``f_i`` with the (channel-mapped) style of ``f_s`` at ``level`` (0-based)."""
    return params(level, f_s, f_i, detach_stats)
