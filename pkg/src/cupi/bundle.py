"""Model bundle (backbone + generator), three-stream forward and checkpoint I/O."""
from __future__ import annotations

import copy
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, ForwardTrace, init_model
from .errors import FormatError, ShapeError
from .generator import StyleGenerator

CHECKPOINT_VERSION = 1


@dataclass
class ModelBundle:
    backbone: Backbone
    generator: StyleGenerator
    cfg: BackboneConfig
    provenance: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: BackboneConfig, **provenance) -> "ModelBundle":
        return cls(init_model(cfg), StyleGenerator(cfg.widths), cfg, dict(provenance))

    def parameters(self):
        yield from self.backbone.parameters()
        yield from self.generator.parameters()

    def clone(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def to(self, dtype) -> "ModelBundle":
        self.backbone.to(dtype)
        self.generator.to(dtype)
        return self

    def named_arrays(self) -> dict[str, torch.Tensor]:
        """Every parameter under its stable checkpoint name."""
        out = {}
        for l, conv in enumerate(self.backbone.blocks, start=1):
            out[f"backbone.block{l}.weight"] = conv.weight
            out[f"backbone.block{l}.bias"] = conv.bias
        out["backbone.bottleneck.weight"] = self.backbone.bottleneck.weight
        out["backbone.bottleneck.bias"] = self.backbone.bottleneck.bias
        out["backbone.classifier.weight"] = self.backbone.classifier.weight
        out["backbone.classifier.bias"] = self.backbone.classifier.bias
        for l, lvl in enumerate(self.generator.levels, start=1):
            for stat in ("mu", "sigma"):
                cmap = getattr(lvl, stat)
                out[f"gen.l{l}.{stat}.weight"] = cmap.weight
                out[f"gen.l{l}.{stat}.bias"] = cmap.bias
        return out

    def __call__(self, x: torch.Tensor) -> ForwardTrace:
        # deployed path: the generator never runs at inference
        return self.backbone(x)


@dataclass
class StreamTraces:
    s: Optional[ForwardTrace]
    i: Optional[ForwardTrace]
    t: Optional[ForwardTrace]


def parallel_forward(
    bundle: ModelBundle,
    x_s: torch.Tensor,
    x_i: Optional[torch.Tensor] = None,
    x_t: Optional[torch.Tensor] = None,
    detach_stats: bool = False,
    style_perm: Optional[torch.Tensor] = None,
) -> StreamTraces:
    """Run the authorized, CUPI and unauthorized streams block by block.

    After each block the CUPI features are replaced by the generator output
    built from the authorized features of the same block, so later blocks see
    the re-styled map. ``style_perm`` optionally shuffles which authorized row
    donates its style to each CUPI row.
    """
    net, gen = bundle.backbone, bundle.generator
    for x in (x_s, x_i, x_t):
        if x is not None:
            net.check_input(x)
    if x_i is not None and len(x_i) != len(x_s):
        raise ShapeError(f"CUPI batch ({len(x_i)}) must pair row-wise with authorized batch ({len(x_s)})")
    pyr = {"s": [], "i": [], "t": []}
    h = {"s": x_s, "i": x_i, "t": x_t}
    for level in range(bundle.cfg.num_levels):
        for key in "sit":
            if h[key] is not None:
                h[key] = net.block(level, h[key])
        if h["i"] is not None:
            donor = h["s"] if style_perm is None else h["s"][style_perm]
            h["i"] = gen(level, donor, h["i"], detach_stats)
        for key in "sit":
            if h[key] is not None:
                pyr[key].append(h[key])

    def head(key):
        if h[key] is None:
            return None
        p = net.embed(h[key])
        return ForwardTrace(pyr[key], p, net.classifier(p))

    return StreamTraces(head("s"), head("i"), head("t"))


# ------------------------------------------------------------------ checkpoints


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)


def _read_meta(arrays) -> dict:
    if "__meta__" not in arrays:
        raise FormatError("checkpoint has no __meta__ record")
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('version')!r}")
    return meta


def save_checkpoint(bundle: ModelBundle, path, extra: Optional[dict[str, np.ndarray]] = None) -> Path:
    """Write a single ``.npz`` container: metadata plus little-endian float32 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: t.detach().cpu().numpy().astype("<f4") for name, t in bundle.named_arrays().items()
    }
    meta = {
        "version": CHECKPOINT_VERSION,
        "backbone": asdict(bundle.cfg),
        "provenance": bundle.provenance,
    }
    arrays.update(extra or {})
    with open(path, "wb") as f:
        np.savez(f, __meta__=_meta_array(meta), **arrays)
    return path


def _open_npz(path):
    try:
        arrays = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise FormatError(f"{path} is not a checkpoint container: {exc}") from None
    if not isinstance(arrays, np.lib.npyio.NpzFile):
        raise FormatError(f"{path} holds a bare array, not a checkpoint container")
    return arrays


def load_checkpoint(path) -> ModelBundle:
    with _open_npz(path) as arrays:
        meta = _read_meta(arrays)
        cfg = BackboneConfig(**meta["backbone"])
        bundle = ModelBundle(Backbone(cfg), StyleGenerator(cfg.widths), cfg, meta.get("provenance", {}))
        with torch.no_grad():
            for name, tensor in bundle.named_arrays().items():
                if name not in arrays:
                    raise FormatError(f"checkpoint is missing array {name!r}")
                value = arrays[name]
                if value.shape != tuple(tensor.shape):
                    raise FormatError(f"array {name!r} has shape {value.shape}, expected {tuple(tensor.shape)}")
                tensor.copy_(torch.from_numpy(value.astype(np.float32)))
    return bundle
