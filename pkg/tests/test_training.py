import numpy as np
import pytest
import torch

import cupi.training as training
from cupi.backbone import BackboneConfig, to_tensor
from cupi.bundle import ModelBundle, load_checkpoint, parallel_forward
from cupi.data import SynthesisSpec, load_mnist5k, stratified_split
from cupi.dimb import init_dimb
from cupi.errors import ConfigError, TrainingDiverged
from cupi.losses import LossWeights, total_loss
from cupi.training import (
    Batch,
    TrainConfig,
    protected_step_loss,
    train_baseline,
    train_target_free,
    train_target_specified,
)

from conftest import make_dataset

TINY = BackboneConfig(widths=(4, 8), bottleneck_dim=6, num_classes=4, input_shape=(8, 8, 1), seed=0)
OFF = LossWeights(enable_cupi=False, enable_unauthorized=False, enable_style=False, enable_dis=False)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=32, lr=1e-3, backbone=TINY)
    base.update(kw)
    return TrainConfig(**base)


def _params(bundle):
    return {k: v.detach().clone() for k, v in bundle.named_arrays().items()}


def test_smoke_run_emits_one_record_per_epoch():
    s, t = make_dataset(256), make_dataset(256, seed=1, tag="unauthorized")
    result = train_target_specified(tiny_cfg(), s, t)
    assert [e["epoch"] for e in result.epochs] == [1, 2]
    assert len(result.steps) == 2 * (256 // 32)
    assert all(np.isfinite(r["total"]) for r in result.steps)
    assert result.dimb.initialized


def test_same_seed_same_run():
    s, t = make_dataset(96), make_dataset(96, seed=1, tag="unauthorized")
    a = train_target_specified(tiny_cfg(), s, t)
    b = train_target_specified(tiny_cfg(), s, t)
    assert a.steps == b.steps
    for k, v in _params(a.bundle).items():
        assert torch.equal(v, _params(b.bundle)[k])


def test_baseline_same_seed_identical_parameters():
    s = make_dataset(96)
    a, b = train_baseline(tiny_cfg(), s), train_baseline(tiny_cfg(), s)
    for k, v in _params(a.bundle).items():
        assert torch.equal(v, _params(b.bundle)[k])


def test_all_protective_terms_off_matches_baseline_bitwise():
    s, t = make_dataset(128), make_dataset(128, seed=1, tag="unauthorized")
    protected = train_target_specified(tiny_cfg(weights=OFF), s, t)
    baseline = train_baseline(tiny_cfg(), s)
    pa, pb = _params(protected.bundle), _params(baseline.bundle)
    for k in pb:
        if k.startswith("backbone."):
            assert torch.equal(pa[k], pb[k]), k
    assert [r["total"] for r in protected.steps] == [r["total"] for r in baseline.steps]


def test_class_count_mismatch():
    with pytest.raises(ConfigError):
        train_target_specified(tiny_cfg(), make_dataset(64), make_dataset(64, k=3, tag="unauthorized"))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(mode="target-free")
    with pytest.raises(ConfigError):
        TrainConfig(mode="foo")


def test_divergence_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = training.baseline_step_loss

    def flaky(bundle, b_s, a):
        calls["n"] += 1
        if calls["n"] == 5:
            return total_loss({"L_cls": float("nan"), "L_Stl": 0.0, "L_Dis": 0.0})
        return real(bundle, b_s, a)

    monkeypatch.setattr(training, "baseline_step_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train_baseline(tiny_cfg(), make_dataset(128), checkpoint_dir=tmp_path)
    good = info.value.last_good
    assert good is not None
    restored = load_checkpoint(tmp_path / "checkpoint_last_good.npz")
    for k, v in good.named_arrays().items():
        assert torch.equal(v.detach().float(), restored.named_arrays()[k].detach())


def test_checkpoints_are_written_and_round_trip(tmp_path):
    s, t = make_dataset(64), make_dataset(64, seed=1, tag="unauthorized")
    result = train_target_specified(tiny_cfg(checkpoint_every=1), s, t, checkpoint_dir=tmp_path)
    names = sorted(p.name for p in result.checkpoints)
    assert names == ["checkpoint_epoch001.npz", "checkpoint_epoch002.npz", "checkpoint_final.npz"]
    restored = load_checkpoint(tmp_path / "checkpoint_final.npz")
    for k, v in result.bundle.named_arrays().items():
        assert torch.equal(v.detach(), restored.named_arrays()[k])
    assert restored.provenance["mode"] == "target-specified"


def test_target_free_synthesized_set():
    s = make_dataset(96)
    cfg = tiny_cfg(mode="target-free", synthesis=SynthesisSpec(seed=5))
    a, b = train_target_free(cfg, s), train_target_free(cfg, s)
    assert np.array_equal(a.synthesized.label_histogram(), s.label_histogram())
    assert np.array_equal(a.synthesized.images, b.synthesized.images)
    assert a.steps == b.steps


def test_baseline_loss_falls_over_first_three_epochs():
    train, _ = stratified_split(load_mnist5k(), 26, 1)
    backbone = BackboneConfig(widths=(8, 16), bottleneck_dim=16)
    wins = 0
    for seed in range(3):
        cfg = TrainConfig(mode="baseline", epochs=3, lr=1e-3, seed=seed, backbone=backbone)
        result = train_baseline(cfg, train)
        # unscaled cross-entropy: divide out the rising factor
        ce = [e["L_s"] / e["alpha"] for e in result.epochs]
        wins += all(a >= b for a, b in zip(ce, ce[1:]))
    assert wins >= 2


def test_full_objective_finite_differences():
    torch.manual_seed(0)
    # 16x16 inputs keep every pyramid level wider than 2x2, so the style path carries signal
    cfg = BackboneConfig(widths=(4, 8), bottleneck_dim=6, num_classes=4, input_shape=(16, 16, 1), seed=0)
    bundle = ModelBundle.create(cfg).to(torch.float64)
    with torch.no_grad():
        for lvl in bundle.generator.levels:
            lvl.mu.weight.add_(0.1 * torch.randn_like(lvl.mu.weight))
            lvl.sigma.bias.add_(0.3)
    s, t = make_dataset(6, shape=(16, 16, 1)), make_dataset(6, shape=(16, 16, 1), seed=1, tag="unauthorized")
    cupi = t.retag("cupi")
    state = init_dimb(bundle, s, cupi)
    # shift the centers so that no clamp sits at its kink
    state.d_centers.centers += 0.05

    def batch(ds):
        return Batch(to_tensor(ds.images, torch.float64), torch.from_numpy(ds.labels), ds.sample_index)

    b_s, b_i, b_t = batch(s), batch(cupi), batch(t)
    w = LossWeights(neg_bound=50.0)

    def loss():
        return protected_step_loss(bundle, state, b_s, b_i, b_t, 0.7, w, update_banks=False).total

    params = list(bundle.parameters())
    for p in params:
        p.grad = None
    loss().backward()
    h = 1e-6
    for name, p in bundle.named_arrays().items():
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            with torch.no_grad():
                flat[k] = old + h
                up = loss().item()
                flat[k] = old - h
                down = loss().item()
                flat[k] = old
            nflat[k] = (up - down) / (2 * h)
        # floor: parameters with an identically zero gradient only see finite-difference noise
        rel = (p.grad - numeric).norm() / max(numeric.norm(), p.grad.norm(), 1e-6)
        assert rel <= 1e-3, f"{name}: relative error {rel:.2e}"


def test_pooled_head_sees_only_the_last_level_mean_map():
    # global pooling of a re-styled map returns its injected mean, so the CUPI
    # bottleneck depends on the authorized batch through W_mu at the last level only
    cfg = BackboneConfig(widths=(4, 8), bottleneck_dim=6, num_classes=4, input_shape=(16, 16, 1), seed=0)
    bundle = ModelBundle.create(cfg).to(torch.float64)
    x_s = torch.rand(3, 1, 16, 16, dtype=torch.float64)
    a = parallel_forward(bundle, x_s, torch.rand(3, 1, 16, 16, dtype=torch.float64))
    b = parallel_forward(bundle, x_s, torch.rand(3, 1, 16, 16, dtype=torch.float64))
    assert torch.allclose(a.i.bottleneck, b.i.bottleneck, atol=1e-10)
    a.i.logits.sum().backward()
    live = {k for k, v in bundle.named_arrays().items() if k.startswith("gen.") and v.grad is not None
            and v.grad.abs().max() > 1e-12}
    assert live == {"gen.l2.mu.weight", "gen.l2.mu.bias"}
