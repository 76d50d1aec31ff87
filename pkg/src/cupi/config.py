"""Experiment configuration: a versioned YAML schema with defaults and strict validation.

Every key is optional; an empty file yields the default experiment (30
epochs, batch size 32 per domain, Adam at 1e-4). Unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator

from .backbone import BackboneConfig
from .data import (
    DomainShiftSpec,
    LabeledDataset,
    SynthesisSpec,
    WatermarkPatchSpec,
    apply_domain_shift,
    load_idx_dataset,
    load_mnist5k,
    stratified_split,
)
from .errors import ConfigError
from .evaluation import AttackConfig
from .losses import LossWeights
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigValidationError(ConfigError):
    def __init__(self, violations: list[str], source=None):
        self.violations = violations
        where = f" in {source}" if source else ""
        super().__init__(f"{len(violations)} config violation(s){where}:\n  " + "\n  ".join(violations))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ShiftModel(_Strict):
    kind: Literal["color-invert", "channel-permute", "hue-rotate", "additive-texture"]
    seed: int = 0
    magnitude: float = Field(1.0, ge=0.0, le=1.0)

    def spec(self) -> DomainShiftSpec:
        return DomainShiftSpec(self.kind, self.seed, self.magnitude)


class PatchModel(_Strict):
    anchor: tuple[int, int] = (0, 0)
    size: tuple[int, int] = (5, 5)
    fill: Literal["solid", "checker"] = "solid"
    value: float = Field(1.0, ge=0.0, le=1.0)

    def spec(self) -> WatermarkPatchSpec:
        if self.fill == "checker":
            return WatermarkPatchSpec.checkerboard(self.anchor, self.size, 0.0, self.value)
        return WatermarkPatchSpec.solid(self.anchor, self.size, self.value)


class DataModel(_Strict):
    source: Literal["mnist5k", "idx"] = "mnist5k"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    n_train_per_class: int = Field(400, ge=1)
    n_test_per_class: int = Field(100, ge=1)
    num_classes: int = Field(10, ge=1)
    unauthorized_shift: ShiftModel = ShiftModel(kind="color-invert")
    heldout_shifts: dict[str, ShiftModel] = Field(
        default_factory=lambda: {"texture": ShiftModel(kind="additive-texture", seed=3, magnitude=0.3)}
    )

    @field_validator("train_images", "train_labels", "test_images", "test_labels")
    @classmethod
    def _exists(cls, v, info: ValidationInfo):
        if v is None:
            return v
        base = (info.context or {}).get("base_dir")
        path = Path(v) if base is None or Path(v).is_absolute() else Path(base) / v
        if not path.exists():
            raise ValueError(f"file not found: {path}")
        return str(path)


class ModelModel(_Strict):
    widths: tuple[int, ...] = (16, 32, 64)
    bottleneck_dim: int = Field(64, ge=1)
    bottleneck_norm: bool = True

    @field_validator("widths")
    @classmethod
    def _widths(cls, v):
        if len(v) < 1 or any(w < 1 for w in v):
            raise ValueError("widths must be a non-empty list of positive integers")
        return v


class LossModel(_Strict):
    neg_bound: float = Field(1.0, gt=0)
    detach_style_targets: bool = False
    enable_cupi: bool = True
    enable_unauthorized: bool = True
    enable_style: bool = True
    enable_dis: bool = True


class TrainModel(_Strict):
    mode: Literal["target-specified", "target-free", "baseline"] = "target-specified"
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-4, gt=0)
    shuffle_style: bool = False
    checkpoint_every: int = Field(0, ge=0)
    grad_clip: Optional[float] = Field(None, gt=0)


class SynthesisModel(_Strict):
    noise_std: float = Field(0.5, gt=0)
    per_channel: bool = True
    seed: int = 0


class WatermarkModel(_Strict):
    patch: PatchModel = PatchModel()
    threshold: float = 50.0
    # clamp bound for ownership training; None falls back to loss.neg_bound
    neg_bound: Optional[float] = Field(None, gt=0)


class AttackModel(_Strict):
    method: Literal["ftal", "rtal", "overwrite"] = "ftal"
    epochs: int = Field(5, ge=0)
    lr: float = Field(1e-4, gt=0)
    fraction: float = Field(0.1, gt=0, le=1)
    batch_size: int = Field(32, ge=1)
    overwrite_patch: PatchModel = PatchModel(anchor=(23, 23), size=(5, 5), fill="checker")


class AuthzModel(_Strict):
    scheme: Literal[1, 2, 3] = 1


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataModel = DataModel()
    model: ModelModel = ModelModel()
    loss: LossModel = LossModel()
    train: TrainModel = TrainModel()
    synthesis: SynthesisModel = SynthesisModel()
    watermark: WatermarkModel = WatermarkModel()
    attack: AttackModel = AttackModel()
    authz: AuthzModel = AuthzModel()

    # ---------------------------------------------------------- derived specs

    def backbone_config(self, input_shape=(28, 28, 1)) -> BackboneConfig:
        return BackboneConfig(
            self.model.widths,
            self.model.bottleneck_dim,
            self.data.num_classes,
            tuple(input_shape),
            self.seed,
            self.model.bottleneck_norm,
        )

    def train_config(self, mode: Optional[str] = None, input_shape=(28, 28, 1), **overrides) -> TrainConfig:
        t = self.train
        kwargs = dict(
            mode=mode or t.mode,
            epochs=t.epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            seed=self.seed,
            backbone=self.backbone_config(input_shape),
            weights=LossWeights(**self.loss.model_dump()),
            synthesis=self.synthesis_spec(),
            shuffle_style=t.shuffle_style,
            checkpoint_every=t.checkpoint_every,
            grad_clip=t.grad_clip,
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def watermark_train_config(self, input_shape=(28, 28, 1)) -> TrainConfig:
        """Target-specified schedule for ownership training, with the watermark clamp bound if set."""
        cfg = self.train_config("target-specified", input_shape)
        if self.watermark.neg_bound is None:
            return cfg
        return replace(cfg, weights=replace(cfg.weights, neg_bound=self.watermark.neg_bound))

    def synthesis_spec(self) -> SynthesisSpec:
        return SynthesisSpec(**self.synthesis.model_dump())

    def attack_config(self, method: Optional[str] = None) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            method=method or a.method,
            epochs=a.epochs,
            lr=a.lr,
            fraction=a.fraction,
            batch_size=a.batch_size,
            seed=self.seed,
            overwrite_patch=a.overwrite_patch.spec(),
        )


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form; independent of key order in the source file."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _format_error(err: dict) -> str:
    loc = ".".join(str(p) for p in err["loc"]) or "<root>"
    return f"{loc}: {err['msg']}"


def validate_config(data, base_dir=None, source=None) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigValidationError([f"<root>: expected a mapping, got {type(data).__name__}"], source)
    try:
        return ExperimentConfig.model_validate(data, context={"base_dir": base_dir})
    except ValidationError as exc:
        raise ConfigValidationError([_format_error(e) for e in exc.errors()], source) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigValidationError([f"<root>: not valid YAML ({exc})"], path) from None
    return validate_config(data, base_dir=path.parent, source=path)


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


# ------------------------------------------------------------------ datasets


@dataclass
class ExperimentData:
    train: LabeledDataset
    test: LabeledDataset
    unauthorized_train: LabeledDataset
    unauthorized_test: LabeledDataset
    unauthorized_name: str
    heldout: dict[str, LabeledDataset] = field(default_factory=dict)


def load_experiment_data(cfg: ExperimentConfig) -> ExperimentData:
    d = cfg.data
    if d.source == "mnist5k":
        train, test = stratified_split(load_mnist5k(), d.n_train_per_class, d.n_test_per_class)
    else:
        missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels") if getattr(d, k) is None]
        if missing:
            raise ConfigValidationError([f"data.{k}: required when data.source is 'idx'" for k in missing])
        train = load_idx_dataset(d.train_images, d.train_labels, num_classes=d.num_classes)
        test = load_idx_dataset(d.test_images, d.test_labels, num_classes=d.num_classes)
    shift = d.unauthorized_shift.spec()
    return ExperimentData(
        train=train,
        test=test,
        unauthorized_train=apply_domain_shift(train, shift),
        unauthorized_test=apply_domain_shift(test, shift),
        unauthorized_name=d.unauthorized_shift.kind,
        heldout={name: apply_domain_shift(test, s.spec()) for name, s in d.heldout_shifts.items()},
    )
