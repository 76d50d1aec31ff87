"""Domain-information memory banks.

Per-sample rows are addressed by dataset sample index; per-class centers are
recomputed from scratch after every write. Banks are plain tensors held
outside autograd, so no loss can ever send gradient into them.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .bundle import ModelBundle, parallel_forward
from .backbone import to_tensor
from .data import LabeledDataset
from .errors import BoundsError, ConfigError, StateError
from .generator import StyleStats, channel_stats

BANK_DTYPE = torch.float64


def _as_index(indices) -> torch.Tensor:
    return torch.as_tensor(np.asarray(indices), dtype=torch.long)


class SampleBank:
    """``N x C`` rows with one label and one ``filled`` flag per row."""

    def __init__(self, num_rows: int, dim: int, labels: Sequence[int]):
        labels = _as_index(labels)
        if len(labels) != num_rows:
            raise ConfigError(f"bank has {num_rows} rows but {len(labels)} labels")
        self.rows = torch.zeros(num_rows, dim, dtype=BANK_DTYPE)
        self.labels = labels.clone()
        self.filled = torch.zeros(num_rows, dtype=torch.bool)

    def __len__(self):
        return self.rows.shape[0]

    def write(self, indices, values: torch.Tensor, labels=None) -> None:
        idx = _as_index(indices)
        if idx.numel() and (idx.min() < 0 or idx.max() >= len(self)):
            raise BoundsError(f"bank index out of range [0, {len(self)}): {idx.tolist()}")
        values = values.detach().to(BANK_DTYPE)
        if values.shape != (idx.numel(), self.rows.shape[1]):
            raise ConfigError(f"values of shape {tuple(values.shape)} do not fit bank rows")
        self.rows[idx] = values
        if labels is not None:
            self.labels[idx] = _as_index(labels)
        self.filled[idx] = True


class ClassBank:
    """``K x C`` class centers."""

    def __init__(self, num_classes: int, dim: int):
        self.centers = torch.zeros(num_classes, dim, dtype=BANK_DTYPE)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def recompute(self, samples: SampleBank) -> None:
        self.centers = group_means(samples.rows, samples.labels, samples.filled, self.num_classes)


def group_means(rows: torch.Tensor, labels: torch.Tensor, filled: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Mean of the filled rows of each class; classes with no filled rows get zeros."""
    rows, labels = rows[filled], labels[filled]
    sums = torch.zeros(num_classes, rows.shape[1], dtype=rows.dtype).index_add_(0, labels, rows)
    counts = torch.bincount(labels, minlength=num_classes).to(rows.dtype)
    return sums / counts.clamp_min(1.0)[:, None]


def lookup_class(bank: ClassBank, labels) -> torch.Tensor:
    idx = _as_index(labels)
    if idx.numel() and (idx.min() < 0 or idx.max() >= bank.num_classes):
        raise BoundsError(f"labels must lie in [0, {bank.num_classes})")
    return bank.centers[idx]


@dataclass
class LevelCell:
    mu_samples: SampleBank
    sigma_samples: SampleBank
    mu_centers: ClassBank
    sigma_centers: ClassBank


class DIMBState:
    """``L`` style cells over the authorized set plus one bottleneck cell over the CUPI set."""

    def __init__(self, widths: Sequence[int], bottleneck_dim: int, num_classes: int, s_labels, t_labels):
        n_s, n_t = len(s_labels), len(t_labels)
        self.num_classes = num_classes
        self.levels = [
            LevelCell(
                SampleBank(n_s, c, s_labels),
                SampleBank(n_s, c, s_labels),
                ClassBank(num_classes, c),
                ClassBank(num_classes, c),
            )
            for c in widths
        ]
        self.d_samples = SampleBank(n_t, bottleneck_dim, t_labels)
        self.d_centers = ClassBank(num_classes, bottleneck_dim)
        self.initialized = False

    @property
    def num_cells(self) -> int:
        return len(self.levels) + 1

    def recompute_centers(self) -> None:
        for cell in self.levels:
            cell.mu_centers.recompute(cell.mu_samples)
            cell.sigma_centers.recompute(cell.sigma_samples)
        self.d_centers.recompute(self.d_samples)

    def all_filled(self) -> bool:
        banks = [b for c in self.levels for b in (c.mu_samples, c.sigma_samples)] + [self.d_samples]
        return all(bool(b.filled.all()) for b in banks)

    def require_initialized(self) -> None:
        if not self.initialized:
            raise StateError("memory banks have not been initialized")

    def clone(self) -> "DIMBState":
        return copy.deepcopy(self)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l, cell in enumerate(self.levels, start=1):
            out[f"dimb.l{l}.mu.samples"] = cell.mu_samples.rows.numpy()
            out[f"dimb.l{l}.mu.centers"] = cell.mu_centers.centers.numpy()
            out[f"dimb.l{l}.sigma.samples"] = cell.sigma_samples.rows.numpy()
            out[f"dimb.l{l}.sigma.centers"] = cell.sigma_centers.centers.numpy()
        out["dimb.d.samples"] = self.d_samples.rows.numpy()
        out["dimb.d.centers"] = self.d_centers.centers.numpy()
        return {k: v.astype("<f4") for k, v in out.items()}


def write_batch(
    state: DIMBState,
    level_stats: Sequence[StyleStats] | None,
    p_i: torch.Tensor | None,
    s_indices,
    t_indices,
    s_labels=None,
    t_labels=None,
) -> None:
    """Overwrite sample rows without touching the class centers."""
    if level_stats is not None:
        if len(level_stats) != len(state.levels):
            raise ConfigError(f"expected stats for {len(state.levels)} levels, got {len(level_stats)}")
        for cell, stats in zip(state.levels, level_stats):
            cell.mu_samples.write(s_indices, stats.mean, s_labels)
            cell.sigma_samples.write(s_indices, stats.std, s_labels)
    if p_i is not None:
        state.d_samples.write(t_indices, p_i, t_labels)


def update_after_batch(
    state: DIMBState,
    level_stats: Sequence[StyleStats] | None,
    p_i: torch.Tensor | None,
    s_indices,
    t_indices,
    s_labels=None,
    t_labels=None,
) -> DIMBState:
    """Discard-and-replace update followed by a full recomputation of the centers.

    The state is updated in place and returned.
    """
    write_batch(state, level_stats, p_i, s_indices, t_indices, s_labels, t_labels)
    state.recompute_centers()
    return state


def labels_by_index(ds: LabeledDataset) -> np.ndarray:
    out = np.empty(len(ds), dtype=np.int64)
    out[ds.sample_index] = ds.labels
    return out


@torch.no_grad()
def init_dimb(
    bundle: ModelBundle,
    authorized: LabeledDataset,
    cupi_init: LabeledDataset,
    batch_size: int = 256,
    detach_stats: bool = False,
) -> DIMBState:
    """One frozen traversal of both sets, then class centers from every stored row.

    CUPI chunk ``k`` is paired with the authorized rows starting at the same
    offset (wrapping around) so that the generator has a style donor for every
    CUPI sample.
    """
    if authorized.num_classes != cupi_init.num_classes:
        raise ConfigError("authorized and CUPI sets disagree on the number of classes")
    if len(authorized) == 0 or len(cupi_init) == 0:
        raise ConfigError("memory banks need non-empty authorized and CUPI sets")
    cfg = bundle.cfg
    state = DIMBState(
        cfg.widths, cfg.bottleneck_dim, cfg.num_classes, labels_by_index(authorized), labels_by_index(cupi_init)
    )
    was_training = bundle.backbone.training, bundle.generator.training
    bundle.backbone.eval()
    bundle.generator.eval()
    dtype = next(bundle.backbone.parameters()).dtype
    x_s_all = to_tensor(authorized.images, dtype)
    x_i_all = to_tensor(cupi_init.images, dtype)
    n_s, n_i = len(authorized), len(cupi_init)
    for start in range(0, max(n_s, n_i), batch_size):
        i_pos = np.arange(start, min(start + batch_size, n_i)) if start < n_i else None
        s_pos = np.arange(start, min(start + batch_size, n_s)) if start < n_s else None
        if i_pos is not None:
            donors = (start + np.arange(len(i_pos))) % n_s
            tr = parallel_forward(bundle, x_s_all[donors], x_i_all[i_pos], detach_stats=detach_stats)
            state.d_samples.write(cupi_init.sample_index[i_pos], tr.i.bottleneck)
        if s_pos is not None:
            tr = parallel_forward(bundle, x_s_all[s_pos])
            stats = [channel_stats(f) for f in tr.s.pyramid]
            write_batch(state, stats, None, authorized.sample_index[s_pos], None)
    state.recompute_centers()
    state.initialized = True
    bundle.backbone.train(was_training[0])
    bundle.generator.train(was_training[1])
    return state
