"""Accuracy and drop metrics, ownership verification, removal attacks, authorization schemes."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .backbone import argmax_first, init_classifier, to_tensor
from .bundle import ModelBundle
from .data import (
    DomainShiftSpec,
    LabeledDataset,
    WatermarkPatchSpec,
    apply_domain_shift,
    apply_watermark,
    concat,
    subset,
    synthesize_unauthorized,
)
from .errors import ConfigError
from .losses import class_loss
from .training import TrainConfig, TrainResult, train_target_specified

ATTACK_METHODS = ("ftal", "rtal", "overwrite")


@torch.no_grad()
def predict_dataset(bundle: ModelBundle, ds: LabeledDataset, batch_size: int = 1000) -> np.ndarray:
    """Labels predicted by the deployed path (no generator)."""
    bundle.backbone.eval()
    dtype = next(bundle.backbone.parameters()).dtype
    x = to_tensor(ds.images, dtype)
    preds = [argmax_first(bundle(x[k : k + batch_size]).probs) for k in range(0, len(ds), batch_size)]
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate_accuracy(bundle: ModelBundle, ds: LabeledDataset) -> float:
    """Percentage of correctly classified samples."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate accuracy on an empty dataset")
    return 100.0 * float(np.mean(predict_dataset(bundle, ds) == ds.labels))


# --------------------------------------------------------------------- drops


@dataclass
class AccuracyTable:
    authorized: float
    unauthorized: dict[str, float]


@dataclass
class DropReport:
    authorized_acc_sl: float
    authorized_acc_method: float
    unauthorized_acc_sl: dict[str, float]
    unauthorized_acc_method: dict[str, float]
    authorized_drop: tuple[float, float]
    unauthorized_drop: tuple[float, float]
    per_target_drop: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path, authorized_name: str = "authorized") -> Path:
        """Grid layout: one authorized row, one column per unauthorized target."""
        path = Path(path)
        targets = list(self.unauthorized_acc_sl)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["authorized", *targets, "authorized_drop", "unauthorized_drop"])
            cells = [
                f"{self.unauthorized_acc_sl[t]:.2f} => {self.unauthorized_acc_method[t]:.2f}" for t in targets
            ]
            writer.writerow(
                [
                    f"{authorized_name} ({self.authorized_acc_sl:.2f} => {self.authorized_acc_method:.2f})",
                    *cells,
                    f"{self.authorized_drop[0]:.2f} ({self.authorized_drop[1]:.2f}%)",
                    f"{self.unauthorized_drop[0]:.2f} ({self.unauthorized_drop[1]:.2f}%)",
                ]
            )
        return path


def _as_table(t) -> AccuracyTable:
    if isinstance(t, AccuracyTable):
        return t
    return AccuracyTable(float(t["authorized"]), {k: float(v) for k, v in t["unauthorized"].items()})


def _drop(sl: float, method: float) -> tuple[float, float]:
    d = sl - method
    return d, (100.0 * d / sl if sl else 0.0)


def compute_drops(sl, method) -> DropReport:
    """Absolute and relative drops of ``method`` against the supervised baseline.

    The aggregate unauthorized drop is the mean of per-target absolute drops;
    the relative one is the mean of per-target ``drop / SL`` ratios, in percent.
    """
    sl, method = _as_table(sl), _as_table(method)
    if set(sl.unauthorized) != set(method.unauthorized):
        raise ConfigError(
            f"target grids differ: {sorted(sl.unauthorized)} vs {sorted(method.unauthorized)}"
        )
    if not sl.unauthorized:
        raise ConfigError("need at least one unauthorized target")
    per = {k: _drop(sl.unauthorized[k], method.unauthorized[k]) for k in sl.unauthorized}
    agg = (float(np.mean([d[0] for d in per.values()])), float(np.mean([d[1] for d in per.values()])))
    return DropReport(
        sl.authorized,
        method.authorized,
        dict(sl.unauthorized),
        dict(method.unauthorized),
        _drop(sl.authorized, method.authorized),
        agg,
        per,
    )


# ------------------------------------------------------------------ ownership


@dataclass(frozen=True)
class OwnershipResult:
    acc_clean: float
    acc_patched: float
    threshold: float

    @property
    def gap(self) -> float:
        return self.acc_clean - self.acc_patched

    @property
    def signal(self) -> bool:
        return self.gap >= self.threshold

    @property
    def verdict(self) -> str:
        return "ownership signal present" if self.signal else "ownership signal absent"

    def to_dict(self) -> dict:
        return {**asdict(self), "gap": self.gap, "signal": self.signal, "verdict": self.verdict}


def verify_ownership(
    bundle: ModelBundle, authorized_clean: LabeledDataset, patch: WatermarkPatchSpec, threshold: float = 50.0
) -> OwnershipResult:
    """Signal is present iff clean accuracy exceeds patched accuracy by at least ``threshold`` points."""
    return OwnershipResult(
        acc_clean=evaluate_accuracy(bundle, authorized_clean),
        acc_patched=evaluate_accuracy(bundle, apply_watermark(authorized_clean, patch)),
        threshold=threshold,
    )


# -------------------------------------------------------------------- attacks


@dataclass(frozen=True)
class AttackConfig:
    method: str = "ftal"
    epochs: int = 5
    lr: float = 1e-4
    fraction: float = 0.1
    batch_size: int = 32
    seed: int = 0
    overwrite_patch: Optional[WatermarkPatchSpec] = None

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}; expected one of {ATTACK_METHODS}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"attacker data fraction must lie in (0, 1], got {self.fraction}")
        if self.epochs < 0:
            raise ConfigError(f"attack epochs must be >= 0, got {self.epochs}")
        if self.method == "overwrite" and self.overwrite_patch is None:
            raise ConfigError("overwrite attack needs an attacker patch")


def attacker_subset(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    n = max(1, int(round(fraction * len(ds))))
    pos = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return subset(ds, pos)


def reset_head(bundle: ModelBundle, seed: int) -> ModelBundle:
    """Copy of ``bundle`` with only the classifier layer re-initialized."""
    out = bundle.clone()
    init_classifier(out.backbone, seed)
    return out


def fine_tune(bundle: ModelBundle, ds: LabeledDataset, epochs: int, lr: float, batch_size: int, seed: int):
    """Cross-entropy fine-tuning of every backbone parameter, in place."""
    net = bundle.backbone
    if epochs == 0:
        return bundle
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(int(seed) * 1009 + 17)
    x, y = to_tensor(ds.images), torch.from_numpy(ds.labels)
    b = min(batch_size, len(ds))
    for _ in range(epochs):
        order = torch.randperm(len(ds), generator=gen)
        for k in range(len(ds) // b):
            pos = order[k * b : (k + 1) * b]
            loss = class_loss(net(x[pos]).probs, y[pos], 1.0)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return bundle


def attack(bundle: ModelBundle, cfg: AttackConfig, attacker_data: LabeledDataset) -> ModelBundle:
    """Watermark-removal attack on a copy of ``bundle``; the input is never mutated.

    ``ftal`` fine-tunes all layers, ``rtal`` first re-initializes the
    classifier, ``overwrite`` fine-tunes on the attacker data stamped with the
    attacker's own patch (labels unchanged).
    """
    data = attacker_subset(attacker_data, cfg.fraction, cfg.seed)
    if cfg.method == "rtal":
        out = reset_head(bundle, cfg.seed)
    else:
        out = bundle.clone()
    if cfg.method == "overwrite":
        data = apply_watermark(data, cfg.overwrite_patch)
    out.provenance = {**bundle.provenance, "attack": cfg.method}
    return fine_tune(out, data, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed)


# ----------------------------------------------------------- authorization


@dataclass
class AuthzReport:
    scheme: int
    cells: dict[str, float]
    authorized_cells: list[str]

    @property
    def authorized_acc(self) -> float:
        return float(np.mean([self.cells[c] for c in self.authorized_cells]))

    @property
    def other_acc(self) -> float:
        others = [v for k, v in self.cells.items() if k not in self.authorized_cells]
        return float(np.mean(others))

    @property
    def drop(self) -> tuple[float, float]:
        return _drop(self.authorized_acc, self.other_acc)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "cells": self.cells,
            "authorized_cells": self.authorized_cells,
            "authorized_acc": self.authorized_acc,
            "other_acc": self.other_acc,
            "drop": self.drop,
        }


@dataclass
class AuthzDatasets:
    train: LabeledDataset
    test: LabeledDataset
    patch: WatermarkPatchSpec
    synthesis: object  # SynthesisSpec
    test_shifts: Mapping[str, DomainShiftSpec] = field(default_factory=dict)


def authz_roles(scheme: int, train: LabeledDataset, patch: WatermarkPatchSpec, synthesis):
    """Authorized and unauthorized training roles for schemes 1, 2 and 3."""
    if scheme not in (1, 2, 3):
        raise ConfigError(f"authorization scheme must be 1, 2 or 3, got {scheme}")
    synth = synthesize_unauthorized(train, synthesis)
    if scheme == 1:
        authorized = apply_watermark(train, patch)
        parts = [train, synth, apply_watermark(synth, patch)]
    elif scheme == 2:
        authorized = train
        parts = [apply_watermark(train, patch), synth, apply_watermark(synth, patch)]
    else:
        authorized = train
        parts = [synth]
    return authorized.retag("authorized"), concat(parts, "unauthorized")


def run_authz_scheme(scheme: int, cfg: TrainConfig, datasets: AuthzDatasets, **train_kwargs):
    """Train for an applicability-authorization scheme and evaluate every test cell.

    Test cells are the authorized test set and each unseen shift, each with
    and without the patch. Scheme 1 authorizes only the patched authorized
    cell, scheme 2 only the clean one, scheme 3 both.
    """
    authorized, unauthorized = authz_roles(scheme, datasets.train, datasets.patch, datasets.synthesis)
    result: TrainResult = train_target_specified(cfg, authorized, unauthorized, **train_kwargs)
    domains = {"authorized": datasets.test}
    for name, spec in datasets.test_shifts.items():
        domains[name] = apply_domain_shift(datasets.test, spec)
    cells = {}
    for name, ds in domains.items():
        cells[f"{name}"] = evaluate_accuracy(result.bundle, ds)
        cells[f"{name}+patch"] = evaluate_accuracy(result.bundle, apply_watermark(ds, datasets.patch))
    authorized_cells = {1: ["authorized+patch"], 2: ["authorized"], 3: ["authorized", "authorized+patch"]}[scheme]
    return result, AuthzReport(scheme, cells, authorized_cells)


def summary_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    return path
