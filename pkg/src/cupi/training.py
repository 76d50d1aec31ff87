"""Target-specified, target-free and supervised-baseline training loops."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import BackboneConfig, to_tensor
from .bundle import ModelBundle, parallel_forward, save_checkpoint
from .data import LabeledDataset, SynthesisSpec, synthesize_unauthorized
from .dimb import DIMBState, init_dimb, update_after_batch
from .errors import ConfigError, NumericError, TrainingDiverged
from .generator import channel_stats
from .losses import (
    LossReport,
    LossWeights,
    alpha,
    class_loss,
    classification_loss,
    discriminative_loss,
    style_loss,
    total_loss,
)

log = logging.getLogger(__name__)

MODES = ("target-specified", "target-free", "baseline")

# offsets keeping the per-stream shuffles independent of each other
_STREAM_SEEDS = {"s": 1, "i": 2, "t": 3, "style": 4}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "target-specified"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    synthesis: Optional[SynthesisSpec] = None
    shuffle_style: bool = False
    checkpoint_every: int = 0
    init_batch_size: int = 256
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be > 0 when set, got {self.grad_clip}")
        if self.mode == "target-free" and self.synthesis is None:
            raise ConfigError("target-free training needs a synthesis spec")


@dataclass
class TrainResult:
    bundle: ModelBundle
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    dimb: Optional[DIMBState] = None
    synthesized: Optional[LabeledDataset] = None
    checkpoints: list[Path] = field(default_factory=list)


@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    idx: np.ndarray


class _Stream:
    """Whole dataset as tensors plus a private shuffle generator."""

    def __init__(self, ds: LabeledDataset, seed: int, key: str):
        self.ds = ds
        self.x = to_tensor(ds.images)
        self.y = torch.from_numpy(ds.labels)
        self.gen = torch.Generator().manual_seed(int(seed) * 1009 + _STREAM_SEEDS[key])
        self.order = None

    def __len__(self):
        return len(self.ds)

    def shuffle(self) -> None:
        self.order = torch.randperm(len(self.ds), generator=self.gen)

    def batch(self, step: int, size: int) -> Batch:
        pos = self.order[step * size : (step + 1) * size]
        return Batch(self.x[pos], self.y[pos], self.ds.sample_index[pos.numpy()])


def baseline_step_loss(bundle: ModelBundle, b_s: Batch, a: float) -> LossReport:
    trace = bundle.backbone(b_s.x)
    comps = {"L_s": class_loss(trace.probs, b_s.y, a), "L_i": 0.0, "L_t": 0.0}
    comps["L_cls"] = comps["L_s"]
    comps["L_Stl"] = 0.0
    comps["L_Dis"] = 0.0
    return total_loss(comps, a)


def protected_step_loss(
    bundle: ModelBundle,
    state: DIMBState,
    b_s: Batch,
    b_i: Batch,
    b_t: Batch,
    a: float,
    w: LossWeights,
    style_perm: Optional[torch.Tensor] = None,
    update_banks: bool = True,
) -> LossReport:
    """Three-stream forward, bank update, and the joint objective for one step."""
    tr = parallel_forward(bundle, b_s.x, b_i.x, b_t.x, w.detach_style_targets, style_perm)
    if update_banks:
        stats_s = [channel_stats(f).detach() for f in tr.s.pyramid]
        update_after_batch(state, stats_s, tr.i.bottleneck, b_s.idx, b_i.idx)
    _, comps = classification_loss((tr.s.probs, b_s.y), (tr.i.probs, b_i.y), (tr.t.probs, b_t.y), a, w)
    if w.enable_style:
        stats_t = [channel_stats(f) for f in tr.t.pyramid]
        comps["L_Stl"] = style_loss(state, stats_t, b_t.y, a, w.neg_bound)
    else:
        comps["L_Stl"] = 0.0
    if w.enable_dis:
        comps["L_Dis"] = discriminative_loss(state, tr.s.bottleneck, b_s.y, tr.t.bottleneck, b_t.y, a, w.neg_bound)
    else:
        comps["L_Dis"] = 0.0
    return total_loss(comps, a)


@torch.no_grad()
def _accuracy(bundle: ModelBundle, ds: LabeledDataset, batch_size: int = 1000) -> float:
    x = to_tensor(ds.images)
    correct = 0
    for start in range(0, len(ds), batch_size):
        pred = bundle.backbone(x[start : start + batch_size]).logits.argmax(dim=1).numpy()
        correct += int((pred == ds.labels[start : start + batch_size]).sum())
    return 100.0 * correct / len(ds)


def _fit(
    cfg: TrainConfig,
    authorized: LabeledDataset,
    unauthorized: Optional[LabeledDataset],
    eval_sets: Optional[dict[str, LabeledDataset]] = None,
    checkpoint_dir=None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    protected = unauthorized is not None
    if protected and unauthorized.num_classes != authorized.num_classes:
        raise ConfigError(
            f"class-count mismatch: authorized K={authorized.num_classes}, unauthorized K={unauthorized.num_classes}"
        )
    if protected and unauthorized.image_shape != authorized.image_shape:
        raise ConfigError("authorized and unauthorized images differ in shape")
    if authorized.image_shape != cfg.backbone.input_shape:
        raise ConfigError(f"dataset images {authorized.image_shape} do not match backbone input {cfg.backbone.input_shape}")
    if authorized.num_classes != cfg.backbone.num_classes:
        raise ConfigError("dataset and backbone disagree on the number of classes")

    torch.manual_seed(cfg.seed)
    bundle = ModelBundle.create(cfg.backbone, mode=cfg.mode, seed=cfg.seed, epochs=cfg.epochs)
    optimizer = torch.optim.Adam(list(bundle.parameters()), lr=cfg.lr)
    result = TrainResult(bundle)
    w = cfg.weights

    s = _Stream(authorized, cfg.seed, "s")
    streams = [s]
    if protected:
        cupi = unauthorized.retag("cupi")
        i = _Stream(cupi, cfg.seed, "i")
        t = _Stream(unauthorized, cfg.seed, "t")
        streams += [i, t]
        result.dimb = init_dimb(bundle, authorized, cupi, cfg.init_batch_size, w.detach_style_targets)
        style_gen = torch.Generator().manual_seed(int(cfg.seed) * 1009 + _STREAM_SEEDS["style"])
    n_steps = min(len(st) for st in streams) // cfg.batch_size
    if n_steps == 0:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the smallest training stream")

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_good = bundle.clone()
    step_no = 0
    for epoch in range(1, cfg.epochs + 1):
        a = alpha(epoch, cfg.epochs)
        for st in streams:
            st.shuffle()
        bundle.backbone.train()
        bundle.generator.train()
        epoch_rows = []
        for k in range(n_steps):
            b_s = s.batch(k, cfg.batch_size)
            try:
                if protected:
                    perm = torch.randperm(cfg.batch_size, generator=style_gen) if cfg.shuffle_style else None
                    report = protected_step_loss(
                        bundle, result.dimb, b_s, i.batch(k, cfg.batch_size), t.batch(k, cfg.batch_size), a, w, perm
                    )
                else:
                    report = baseline_step_loss(bundle, b_s, a)
            except NumericError as exc:
                if ckpt_dir is not None:
                    result.checkpoints.append(save_checkpoint(last_good, ckpt_dir / "checkpoint_last_good.npz"))
                raise TrainingDiverged(f"epoch {epoch} step {k}: {exc}", last_good) from exc
            optimizer.zero_grad(set_to_none=True)
            report.total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(list(bundle.parameters()), cfg.grad_clip)
            optimizer.step()
            row = {"epoch": epoch, "step": step_no, **report.scalars()}
            step_no += 1
            result.steps.append(row)
            epoch_rows.append(row)
            if on_step is not None:
                on_step(row)
        summary = {"epoch": epoch, "alpha": a}
        for key in ("L_s", "L_i", "L_t", "L_cls", "L_Stl", "L_Dis", "total"):
            summary[key] = float(np.mean([r[key] for r in epoch_rows]))
        for name, ds in (eval_sets or {}).items():
            summary[f"acc/{name}"] = _accuracy(bundle, ds)
        result.epochs.append(summary)
        log.info("epoch %d/%d %s", epoch, cfg.epochs, {k: round(v, 4) for k, v in summary.items()})
        last_good = bundle.clone()
        if ckpt_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            result.checkpoints.append(save_checkpoint(bundle, ckpt_dir / f"checkpoint_epoch{epoch:03d}.npz"))
    if ckpt_dir is not None:
        extra = result.dimb.named_arrays() if result.dimb is not None else None
        result.checkpoints.append(save_checkpoint(bundle, ckpt_dir / "checkpoint_final.npz", extra))
    return result


def train_target_specified(
    cfg: TrainConfig, authorized: LabeledDataset, unauthorized: LabeledDataset, **kwargs
) -> TrainResult:
    """Protected training with a known unauthorized domain.

    The CUPI stream starts as a copy of the unauthorized set with the same
    labels; its features are re-styled by the generator at every block.
    """
    return _fit(cfg, authorized, unauthorized, **kwargs)


def train_target_free(cfg: TrainConfig, authorized: LabeledDataset, **kwargs) -> TrainResult:
    """Protected training against a synthesized, randomly re-styled copy of the authorized set."""
    if cfg.synthesis is None:
        raise ConfigError("target-free training needs a synthesis spec")
    synthesized = synthesize_unauthorized(authorized, cfg.synthesis)
    result = _fit(cfg, authorized, synthesized, **kwargs)
    result.synthesized = synthesized
    return result


def train_baseline(cfg: TrainConfig, authorized: LabeledDataset, **kwargs) -> TrainResult:
    """Plain supervised training on the authorized set (same schedule and optimizer)."""
    return _fit(cfg, authorized, None, **kwargs)
