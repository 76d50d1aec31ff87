"""Joint objective: classification, pyramid style and discriminative terms.

Every term entering the objective with a negative sign is clamped from above
at ``neg_bound`` before negation, so no single negated term can contribute
less than ``-neg_bound``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .dimb import DIMBState, lookup_class
from .errors import BoundsError, ConfigError, NumericError
from .generator import StyleStats

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    neg_bound: float = 1.0
    detach_style_targets: bool = False
    enable_cupi: bool = True  # L_i
    enable_unauthorized: bool = True  # L_t
    enable_style: bool = True  # L_Stl
    enable_dis: bool = True  # L_Dis

    def __post_init__(self):
        if not self.neg_bound > 0:
            raise ConfigError(f"neg_bound must be > 0, got {self.neg_bound}")

    @property
    def protective(self) -> bool:
        return self.enable_cupi or self.enable_unauthorized or self.enable_style or self.enable_dis


COMPONENTS = ("L_s", "L_i", "L_t", "L_cls", "L_Stl", "L_Dis")


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict = field(default_factory=dict)
    alpha: float = 0.0

    def scalars(self) -> dict[str, float]:
        def num(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        out = {name: num(self.components.get(name, 0.0)) for name in COMPONENTS}
        out["total"] = num(self.total)
        out["alpha"] = float(self.alpha)
        return out


def alpha(epoch: int, total_epochs: int) -> float:
    """Rising factor ``(epoch / total_epochs) ** 0.9``."""
    if total_epochs <= 0:
        raise ConfigError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return (epoch / total_epochs) ** 0.9


def clamp_negated(x, bound: float):
    """``min(x, bound)`` for a term that will be subtracted from the objective."""
    if isinstance(x, torch.Tensor):
        return torch.clamp(x, max=bound)
    return min(x, bound)


def class_loss(probs: torch.Tensor, labels, a: float) -> torch.Tensor:
    """``a`` times the mean negative log-probability of the true class.

    Against one-hot targets this is the KL divergence from the target to the
    prediction (the target entropy is zero).
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise BoundsError(f"labels must lie in [0, {k})")
    picked = probs.gather(1, labels[:, None]).squeeze(1)
    return a * (-torch.log(picked.clamp_min(PROB_FLOOR))).mean()


def classification_loss(rep_s, rep_i, rep_t, a: float, w: LossWeights):
    """``L_s - clamp(L_i) - clamp(L_t)``; each ``rep`` is ``(probs, labels)`` or None.

    Returns ``(L_cls, components)``; disabled or missing terms contribute 0.
    """
    comps = {"L_s": class_loss(*rep_s, a)}
    l_cls = comps["L_s"]
    for name, rep, enabled in (("L_i", rep_i, w.enable_cupi), ("L_t", rep_t, w.enable_unauthorized)):
        if enabled and rep is not None:
            comps[name] = class_loss(*rep, a)
            l_cls = l_cls - clamp_negated(comps[name], w.neg_bound)
        else:
            comps[name] = 0.0
    comps["L_cls"] = l_cls
    return l_cls, comps


def style_loss(
    state: DIMBState, pyramid_t: Sequence[StyleStats], labels_t, a: float, neg_bound: float = 1.0
) -> torch.Tensor:
    """Negated per-level MSE between unauthorized style stats and authorized class-style centers."""
    state.require_initialized()
    if len(pyramid_t) != len(state.levels):
        raise ConfigError(f"expected stats for {len(state.levels)} levels, got {len(pyramid_t)}")
    total = 0.0
    for cell, stats in zip(state.levels, pyramid_t):
        for bank, value in ((cell.mu_centers, stats.mean), (cell.sigma_centers, stats.std)):
            target = lookup_class(bank, labels_t).to(value.dtype)
            total = total - clamp_negated(a * F.mse_loss(value, target), neg_bound)
    return total


def discriminative_loss(
    state: DIMBState, p_s: Optional[torch.Tensor], labels_s, p_t: Optional[torch.Tensor], labels_t, a: float,
    neg_bound: float = 1.0,
) -> torch.Tensor:
    """Push authorized bottlenecks away from CUPI class centers, pull unauthorized ones toward them."""
    state.require_initialized()
    total = 0.0
    if p_s is not None:
        target = lookup_class(state.d_centers, labels_s).to(p_s.dtype)
        total = total - clamp_negated(a * F.mse_loss(p_s, target), neg_bound)
    if p_t is not None:
        target = lookup_class(state.d_centers, labels_t).to(p_t.dtype)
        total = total + a * F.mse_loss(p_t, target)
    return total


def total_loss(components: dict, alpha_value: float = 0.0) -> LossReport:
    """``L = L_cls + L_Stl + L_Dis``; raises on any non-finite component."""
    for name, value in components.items():
        value = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(value):
            raise NumericError(f"loss component {name} is not finite ({value})")
    total = components.get("L_cls", 0.0) + components.get("L_Stl", 0.0) + components.get("L_Dis", 0.0)
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(float(total), dtype=torch.float64)
    return LossReport(total, dict(components), alpha_value)
