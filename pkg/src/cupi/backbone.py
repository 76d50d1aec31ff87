"""Compact pyramid CNN exposing every block's feature map."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

Tap = Callable[[int, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    bottleneck_dim: int = 64
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (28, 28, 1)
    seed: int = 0
    bottleneck_norm: bool = True  # parameter-free layer norm on the bottleneck vector

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.widths) < 1:
            raise ConfigError("backbone needs at least one pyramid block (L >= 1)")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (H, W, C), got {self.input_shape}")
        dims = list(self.widths) + [self.bottleneck_dim, self.num_classes, *self.input_shape]
        if any(d <= 0 for d in dims):
            raise ConfigError(f"all backbone dimensions must be positive: {dims}")
        h, w = self.spatial_sizes()[-1]
        if h < 1 or w < 1:
            raise ConfigError(
                f"input {self.input_shape[:2]} is too small for {self.num_levels} downsamplings"
            )

    @property
    def num_levels(self) -> int:
        return len(self.widths)

    def spatial_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_shape[:2]
        sizes = []
        for _ in self.widths:
            h, w = h // 2, w // 2
            sizes.append((h, w))
        return sizes


@dataclass
class ForwardTrace:
    pyramid: list[torch.Tensor]
    bottleneck: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.probs = torch.softmax(self.logits, dim=1)


class Backbone(nn.Module):
    """``L`` blocks of (3x3 conv, ReLU, 2x2 average pool), then GAP, bottleneck and classifier."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.input_shape[2], *cfg.widths]
        self.blocks = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel_size=3, padding=1) for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.bottleneck = nn.Linear(cfg.widths[-1], cfg.bottleneck_dim)
        self.classifier = nn.Linear(cfg.bottleneck_dim, cfg.num_classes)

    def block(self, level: int, x: torch.Tensor) -> torch.Tensor:
        """Apply pyramid block ``level`` (0-based)."""
        return F.avg_pool2d(F.relu(self.blocks[level](x)), 2)

    def embed(self, f_last: torch.Tensor) -> torch.Tensor:
        p = self.bottleneck(f_last.mean(dim=(2, 3)))
        if self.cfg.bottleneck_norm:
            p = F.layer_norm(p, p.shape[-1:])
        return p

    def check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.cfg.input_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ShapeError(f"expected batch of shape (B, {c}, {h}, {w}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, tap: Optional[Tap] = None) -> ForwardTrace:
        self.check_input(x)
        pyramid = []
        h = x
        for level in range(self.cfg.num_levels):
            h = self.block(level, h)
            if tap is not None:
                h = tap(level, h)
            pyramid.append(h)
        p = self.embed(h)
        return ForwardTrace(pyramid, p, self.classifier(p))


def _fan_in_init(module: nn.Module, gen: torch.Generator, gain: float) -> None:
    weight = module.weight
    fan_in = weight[0].numel()
    with torch.no_grad():
        weight.copy_(torch.randn(weight.shape, generator=gen, dtype=weight.dtype) * (gain / math.sqrt(fan_in)))
        module.bias.zero_()


def init_classifier(model: Backbone, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed) + 7919)
    _fan_in_init(model.classifier, gen, 1.0)


def init_model(cfg: BackboneConfig) -> Backbone:
    """Seeded fan-in-scaled normal kernels and zero biases."""
    model = Backbone(cfg)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    for conv in model.blocks:
        _fan_in_init(conv, gen, math.sqrt(2.0))
    _fan_in_init(model.bottleneck, gen, 1.0)
    init_classifier(model, cfg.seed)
    return model


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W, C)`` array to a channel-first tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(images), -1, 1))).to(dtype)


def argmax_first(scores) -> np.ndarray:
    """Row-wise argmax; exact ties resolve to the smallest class index."""
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    return np.argmax(np.asarray(scores), axis=1)


@torch.no_grad()
def predict(model: Backbone, batch: torch.Tensor) -> np.ndarray:
    return argmax_first(model(batch).probs)
