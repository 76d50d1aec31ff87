"""Datasets, deterministic domain shifts, watermark patches and style synthesis.

Images are kept as ``float32`` arrays of shape ``(N, H, W, C)`` with values in
``[0, 1]``; conversion to channel-first tensors happens at batch time.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BoundsError, ConfigError, FormatError, ShapeError

DOMAIN_TAGS = ("authorized", "cupi", "unauthorized", "synthesized")
SHIFT_KINDS = ("color-invert", "channel-permute", "hue-rotate", "additive-texture")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

STD_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    sample_index: np.ndarray
    domain_tag: str = "authorized"
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise ShapeError(f"images must be (N, H, W, C), got shape {images.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        index = np.asarray(self.sample_index, dtype=np.int64)
        n = len(images)
        if len(labels) != n or len(index) != n:
            raise ShapeError(
                f"length mismatch: images={n} labels={len(labels)} sample_index={len(index)}"
            )
        if not np.array_equal(np.sort(index), np.arange(n)):
            raise ConfigError("sample_index must be a permutation of 0..N-1")
        if n and (images.min() < 0.0 or images.max() > 1.0):
            raise ConfigError("image intensities must lie in [0, 1]")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise BoundsError(f"labels must lie in [0, {self.num_classes})")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ConfigError(f"unknown domain_tag {self.domain_tag!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_index", index)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def with_images(self, images: np.ndarray, domain_tag: str | None = None) -> "LabeledDataset":
        return replace(self, images=images, domain_tag=domain_tag or self.domain_tag)

    def retag(self, domain_tag: str) -> "LabeledDataset":
        return replace(self, domain_tag=domain_tag)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def subset(ds: LabeledDataset, positions: Sequence[int]) -> LabeledDataset:
    """Select rows by position; the result is re-indexed 0..len-1 in selection order."""
    positions = np.asarray(positions, dtype=np.int64)
    return replace(
        ds,
        images=ds.images[positions],
        labels=ds.labels[positions],
        sample_index=np.arange(len(positions)),
    )


def concat(datasets: Sequence[LabeledDataset], domain_tag: str) -> LabeledDataset:
    if not datasets:
        raise ConfigError("concat needs at least one dataset")
    shapes = {d.image_shape for d in datasets}
    if len(shapes) != 1:
        raise ShapeError(f"cannot concatenate image shapes {sorted(shapes)}")
    k = max(d.num_classes for d in datasets)
    images = np.concatenate([d.images for d in datasets])
    labels = np.concatenate([d.labels for d in datasets])
    return LabeledDataset(images, labels, np.arange(len(labels)), domain_tag, k)


# --------------------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _parse_idx(data: bytes, expected_magic: int, ndim: int, field_name: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{field_name}: truncated header ({len(data)} bytes)")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise FormatError(
            f"{field_name}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    payload = data[header:]
    if len(payload) < count:
        raise FormatError(
            f"{field_name}: truncated payload, expected {count} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx_dataset(
    images_path, labels_path, domain_tag: str = "authorized", num_classes: int = 10
) -> LabeledDataset:
    """Load an IDX image/label pair (optionally gzip-compressed).

    Bytes are rescaled to ``[0, 1]`` by dividing by 255 and samples are
    indexed in file order.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise FormatError(
            f"count mismatch: images has {len(images)} entries, labels has {len(labels)}"
        )
    if len(labels) and labels.max() >= num_classes:
        raise FormatError(f"labels: value {labels.max()} >= num_classes {num_classes}")
    return LabeledDataset(
        images.astype(np.float32)[..., None] / np.float32(255.0),
        labels.astype(np.int64),
        np.arange(len(labels)),
        domain_tag,
        num_classes,
    )


def write_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    """Write a grayscale dataset as an IDX pair, quantizing to bytes."""
    if ds.images.shape[-1] != 1:
        raise ShapeError("IDX export supports single-channel images only")
    n, h, w, _ = ds.images.shape
    pixels = np.rint(ds.images[..., 0] * 255.0).astype(np.uint8)
    opener = gzip.open if str(images_path).endswith(".gz") else open
    with opener(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    opener = gzip.open if str(labels_path).endswith(".gz") else open
    with opener(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_mnist5k() -> LabeledDataset:
    """The bundled 5000-image MNIST subset (500 images per digit, sorted by label)."""
    root = resources.files("cupi") / "_data"
    with resources.as_file(root / "mnist5k-images-idx3-ubyte.gz") as img, resources.as_file(
        root / "mnist5k-labels-idx1-ubyte.gz"
    ) as lab:
        return load_idx_dataset(img, lab)


def stratified_split(
    ds: LabeledDataset, n_train_per_class: int, n_test_per_class: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic per-class split: first rows of each class train, the next ones test."""
    train_pos, test_pos = [], []
    for k in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == k)
        if len(rows) < n_train_per_class + n_test_per_class:
            raise ConfigError(
                f"class {k} has {len(rows)} samples, need {n_train_per_class + n_test_per_class}"
            )
        train_pos.append(rows[:n_train_per_class])
        test_pos.append(rows[n_train_per_class : n_train_per_class + n_test_per_class])
    # interleave classes so that prefixes stay balanced
    train_pos = np.stack(train_pos, axis=1).reshape(-1)
    test_pos = np.stack(test_pos, axis=1).reshape(-1)
    return subset(ds, train_pos), subset(ds, test_pos)


# ------------------------------------------------------------------ domain shift


@dataclass(frozen=True)
class DomainShiftSpec:
    kind: str
    seed: int = 0
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown domain shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError(f"magnitude must lie in [0, 1], got {self.magnitude}")

    @property
    def name(self) -> str:
        return f"{self.kind}-m{self.magnitude:g}-s{self.seed}"


def _hue_rotation_matrix(angle: float) -> np.ndarray:
    # Rodrigues rotation about the gray axis (1, 1, 1) / sqrt(3)
    c, s = np.cos(angle), np.sin(angle)
    k = np.full(3, 1.0 / np.sqrt(3.0))
    cross = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(k, k)


def _texture(shape: tuple[int, int, int], seed: int) -> np.ndarray:
    h, w, c = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty((h, w, c))
    for ch in range(c):
        fy, fx = rng.uniform(1.5, 4.0, size=2) * rng.choice([-1, 1], size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out[..., ch] = 0.5 + 0.5 * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    return out


def apply_domain_shift(ds: LabeledDataset, spec: DomainShiftSpec) -> LabeledDataset:
    """Deterministic pixel-level domain shift; labels and indices are preserved."""
    x = ds.images.astype(np.float64)
    c = x.shape[-1]
    m = spec.magnitude
    if spec.kind == "color-invert":
        out = x + m * (1.0 - 2.0 * x)
    elif spec.kind == "channel-permute":
        perm = np.random.default_rng(spec.seed).permutation(c)
        if c > 1 and np.array_equal(perm, np.arange(c)):
            perm = np.roll(perm, 1)
        out = x[..., perm]
    elif spec.kind == "hue-rotate":
        if c != 3:
            out = x
        else:
            out = x @ _hue_rotation_matrix(2 * np.pi * m).T
    elif spec.kind == "additive-texture":
        out = x + m * _texture(ds.image_shape, spec.seed)
    else:  # pragma: no cover - guarded by DomainShiftSpec
        raise ConfigError(spec.kind)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return ds.with_images(out, "unauthorized")


# --------------------------------------------------------------------- watermark


@dataclass(frozen=True, eq=False)
class WatermarkPatchSpec:
    anchor: tuple[int, int]
    size: tuple[int, int]
    pattern: np.ndarray = field(default=None)

    def __post_init__(self):
        h, w = (int(v) for v in self.size)
        if h < 0 or w < 0:
            raise ConfigError(f"patch size must be non-negative, got {self.size}")
        pattern = np.ones((h, w, 1), np.float32) if self.pattern is None else np.asarray(self.pattern, np.float32)
        if pattern.ndim == 2:
            pattern = pattern[..., None]
        if pattern.shape[:2] != (h, w):
            raise ShapeError(f"pattern shape {pattern.shape[:2]} does not match size {(h, w)}")
        if pattern.size and (pattern.min() < 0.0 or pattern.max() > 1.0):
            raise ConfigError("pattern intensities must lie in [0, 1]")
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))
        object.__setattr__(self, "size", (h, w))
        object.__setattr__(self, "pattern", pattern)

    @classmethod
    def solid(cls, anchor, size, value: float = 1.0) -> "WatermarkPatchSpec":
        return cls(anchor, size, np.full((size[0], size[1], 1), value, np.float32))

    @classmethod
    def checkerboard(cls, anchor, size, low: float = 0.0, high: float = 1.0) -> "WatermarkPatchSpec":
        yy, xx = np.mgrid[0 : size[0], 0 : size[1]]
        board = np.where((yy + xx) % 2 == 0, high, low).astype(np.float32)
        return cls(anchor, size, board[..., None])


def apply_watermark(ds: LabeledDataset, patch: WatermarkPatchSpec) -> LabeledDataset:
    """Overwrite the patch region with the pattern (no blending)."""
    h, w = patch.size
    r, c = patch.anchor
    H, W, C = ds.image_shape
    if r < 0 or c < 0 or r + h > H or c + w > W:
        raise BoundsError(f"patch at {patch.anchor} of size {patch.size} exceeds image {(H, W)}")
    if h == 0 or w == 0:
        return ds
    if patch.pattern.shape[-1] not in (1, C):
        raise ShapeError(f"pattern has {patch.pattern.shape[-1]} channels, images have {C}")
    out = ds.images.copy()
    out[:, r : r + h, c : c + w, :] = np.broadcast_to(patch.pattern, (h, w, C))
    return ds.with_images(out)


# --------------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthesisSpec:
    noise_std: float = 0.5
    per_channel: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.noise_std > 0:
            raise ConfigError(f"noise_std must be > 0, got {self.noise_std}")


def image_stats(images: np.ndarray, per_channel: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-image (mean, population std) over spatial positions, std floored at 1e-5."""
    axes = (1, 2) if per_channel else (1, 2, 3)
    mu = images.mean(axis=axes, keepdims=True)
    sigma = np.maximum(images.std(axis=axes, keepdims=True), STD_EPS)
    return mu, sigma


def restyle(images: np.ndarray, eps_mu: np.ndarray, eps_sigma: np.ndarray, per_channel: bool = True) -> np.ndarray:
    """Image-level AdaIN: swap each image's statistics for shifted ones.

    ``mu' = mu + eps_mu`` and ``sigma' = sigma * exp(eps_sigma)``; the noise
    arrays broadcast against the ``(N, 1, 1, C)`` (or ``(N, 1, 1, 1)``) stats.
    The result is not clipped.
    """
    x = np.asarray(images, np.float64)
    mu, sigma = image_stats(x, per_channel)
    return (x - mu) / sigma * (sigma * np.exp(eps_sigma)) + (mu + eps_mu)


def synthesize_unauthorized(ds_authorized: LabeledDataset, spec: SynthesisSpec) -> LabeledDataset:
    """Random-style copies of the authorized set (labels inherited)."""
    if len(ds_authorized) == 0:
        raise ConfigError("cannot synthesize from an empty dataset")
    n, _, _, c = ds_authorized.images.shape
    cs = c if spec.per_channel else 1
    rng = np.random.default_rng(spec.seed)
    eps = rng.normal(0.0, spec.noise_std, size=(2, n, 1, 1, cs))
    out = restyle(ds_authorized.images, eps[0], eps[1], spec.per_channel)
    return ds_authorized.with_images(np.clip(out, 0.0, 1.0).astype(np.float32), "synthesized")
