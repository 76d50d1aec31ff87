import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cupi.dimb import DIMBState
from cupi.errors import BoundsError, ConfigError, NumericError, StateError
from cupi.generator import StyleStats
from cupi.losses import (
    LossWeights,
    alpha,
    clamp_negated,
    class_loss,
    classification_loss,
    discriminative_loss,
    style_loss,
    total_loss,
)


def test_alpha_endpoints_and_midpoint():
    assert alpha(0, 30) == 0.0
    assert alpha(30, 30) == 1.0
    assert alpha(15, 30) == pytest.approx(0.5359, abs=1e-4)
    with pytest.raises(ConfigError):
        alpha(1, 0)


def test_alpha_is_monotone():
    values = [alpha(e, 17) for e in range(18)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_class_loss_oracles():
    one_hot = torch.eye(3, dtype=torch.float64)
    assert class_loss(one_hot, [0, 1, 2], 1.0).item() == 0.0
    uniform = torch.full((4, 10), 0.1, dtype=torch.float64)
    assert class_loss(uniform, [0, 3, 5, 9], 1.0).item() == pytest.approx(math.log(10), abs=1e-4)
    assert class_loss(uniform, [0, 3, 5, 9], 0.0).item() == 0.0
    with pytest.raises(BoundsError):
        class_loss(uniform, [10, 0, 0, 0], 1.0)


def test_class_loss_is_finite_for_zero_probability():
    probs = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert math.isfinite(class_loss(probs, [1], 1.0).item())


def test_clamp_negated():
    assert clamp_negated(0.3, 1.0) == 0.3
    assert clamp_negated(5.0, 1.0) == 1.0
    assert clamp_negated(torch.tensor(5.0), 2.0).item() == 2.0


def _rep(probs, labels):
    return torch.tensor(probs, dtype=torch.float64), torch.tensor(labels)


def test_cls_reduces_to_source_term_when_others_vanish():
    perfect = _rep([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    src = _rep([[0.6, 0.4], [0.3, 0.7]], [0, 1])
    l_cls, comps = classification_loss(src, perfect, perfect, 1.0, LossWeights())
    assert l_cls.item() == pytest.approx(comps["L_s"].item())


def test_saturated_unauthorized_term_contributes_minus_bound():
    w = LossWeights(neg_bound=0.5)
    src = _rep([[0.5, 0.5]], [0])
    perfect = _rep([[1.0, 0.0]], [0])
    # -log(p) = 10 * bound on the true class
    p = math.exp(-5.0)
    bad = _rep([[p, 1 - p]], [0])
    l_cls, comps = classification_loss(src, perfect, bad, 1.0, w)
    assert comps["L_t"].item() == pytest.approx(5.0)
    assert l_cls.item() == pytest.approx(comps["L_s"].item() - 0.5)


def test_cls_three_sample_oracle():
    a = 0.7
    ps = [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]]
    pi = [[0.5, 0.25, 0.25], [0.2, 0.2, 0.6], [0.9, 0.05, 0.05]]
    pt = [[0.1, 0.1, 0.8], [0.4, 0.4, 0.2], [0.2, 0.5, 0.3]]
    ys, yi, yt = [0, 1, 2], [1, 2, 0], [2, 0, 1]

    def ce(p, y):
        return a * float(np.mean([-math.log(r[k]) for r, k in zip(p, y)]))

    expected = ce(ps, ys) - min(ce(pi, yi), 1.0) - min(ce(pt, yt), 1.0)
    l_cls, _ = classification_loss(_rep(ps, ys), _rep(pi, yi), _rep(pt, yt), a, LossWeights())
    assert l_cls.item() == pytest.approx(expected, abs=1e-12)


def test_disabled_terms_contribute_zero():
    w = LossWeights(enable_cupi=False, enable_unauthorized=False)
    src = _rep([[0.6, 0.4]], [0])
    other = _rep([[0.1, 0.9]], [0])
    l_cls, comps = classification_loss(src, other, other, 1.0, w)
    assert comps["L_i"] == 0.0 and comps["L_t"] == 0.0 and l_cls.item() == comps["L_s"].item()


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(neg_bound=0.0)


def single_cell_state(mu_center=0.0, sigma_center=0.0, d_centers=((0.0,),)):
    state = DIMBState((1,), len(d_centers[0]), len(d_centers), [0], [0])
    state.levels[0].mu_centers.centers = torch.tensor([[mu_center]], dtype=torch.float64)
    state.levels[0].sigma_centers.centers = torch.tensor([[sigma_center]], dtype=torch.float64)
    state.d_centers.centers = torch.tensor(d_centers, dtype=torch.float64)
    state.initialized = True
    return state


def _stats(mu, sigma):
    return [StyleStats(torch.tensor([[mu]], dtype=torch.float64), torch.tensor([[sigma]], dtype=torch.float64))]


def test_style_loss_zero_at_centers():
    state = single_cell_state(0.3, 1.2)
    assert style_loss(state, _stats(0.3, 1.2), [0], 1.0) == 0.0


def test_style_loss_one_unit():
    state = single_cell_state(0.0, 1.0)
    assert float(style_loss(state, _stats(1.0, 1.0), [0], 1.0, neg_bound=1.0)) == pytest.approx(-1.0)
    assert float(style_loss(state, _stats(1.0, 1.0), [0], 0.0)) == 0.0


def test_style_loss_clamps_each_term():
    state = single_cell_state(0.0, 0.0)
    assert float(style_loss(state, _stats(10.0, 10.0), [0], 1.0, neg_bound=1.0)) == pytest.approx(-2.0)


def test_style_loss_needs_initialized_banks():
    state = single_cell_state()
    state.initialized = False
    with pytest.raises(StateError):
        style_loss(state, _stats(0, 1), [0], 1.0)
    with pytest.raises(StateError):
        discriminative_loss(state, None, [0], None, [0], 1.0)


def test_discriminative_loss_oracles():
    state = single_cell_state(d_centers=((0.0,),))
    at = torch.zeros(1, 1, dtype=torch.float64)
    one = torch.ones(1, 1, dtype=torch.float64)
    assert float(discriminative_loss(state, at, [0], at, [0], 1.0)) == 0.0
    assert float(discriminative_loss(state, at, [0], one, [0], 1.0)) == pytest.approx(1.0)


def test_discriminative_push_is_monotone_until_clamp():
    state = single_cell_state(d_centers=((0.0,),))
    at = torch.zeros(1, 1, dtype=torch.float64)
    values = [float(discriminative_loss(state, torch.full((1, 1), d, dtype=torch.float64), [0], at, [0], 1.0))
              for d in np.linspace(0, 0.99, 12)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert float(discriminative_loss(state, torch.full((1, 1), 3.0, dtype=torch.float64), [0], at, [0], 1.0)) == -1.0


def test_total_loss_sum_and_errors():
    assert float(total_loss({"L_cls": 0.0, "L_Stl": 0.0, "L_Dis": 0.0}).total) == 0.0
    rep = total_loss({"L_cls": 1.0, "L_Stl": -0.5, "L_Dis": 0.25})
    assert float(rep.total) == pytest.approx(0.75)
    with pytest.raises(NumericError, match="L_Dis"):
        total_loss({"L_cls": 1.0, "L_Stl": 0.0, "L_Dis": float("nan")})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_report_total_equals_component_sum(values):
    rep = total_loss(dict(zip(("L_cls", "L_Stl", "L_Dis"), values)))
    assert abs(float(rep.total) - sum(values)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 3.0), st.floats(0.01, 1.0))
def test_bounded_negativity(seed, bound, a):
    g = torch.Generator().manual_seed(seed)
    w = LossWeights(neg_bound=bound)
    reps = []
    for _ in range(3):
        probs = torch.softmax(torch.randn(5, 4, generator=g, dtype=torch.float64) * 6, dim=1)
        reps.append((probs, torch.randint(0, 4, (5,), generator=g)))
    l_cls, comps = classification_loss(*reps, a, w)
    assert float(l_cls) >= float(comps["L_s"]) - 2 * bound - 1e-12
    state = DIMBState((2, 3), 4, 4, [0], [0])
    for cell in state.levels:
        cell.mu_centers.centers = torch.randn(cell.mu_centers.centers.shape, generator=g, dtype=torch.float64)
        cell.sigma_centers.centers = torch.rand(cell.sigma_centers.centers.shape, generator=g, dtype=torch.float64)
    state.d_centers.centers = torch.randn(4, 4, generator=g, dtype=torch.float64)
    state.initialized = True
    stats = [StyleStats(torch.randn(5, c, generator=g, dtype=torch.float64) * 5,
                        torch.rand(5, c, generator=g, dtype=torch.float64) * 5) for c in (2, 3)]
    assert float(style_loss(state, stats, reps[2][1], a, bound)) >= -4 * bound - 1e-12
    p = torch.randn(5, 4, generator=g, dtype=torch.float64) * 5
    assert float(discriminative_loss(state, p, reps[0][1], None, None, a, bound)) >= -bound - 1e-12


def test_banks_receive_no_gradient_but_change_the_loss():
    state = single_cell_state(0.0, 1.0, d_centers=((0.0, 0.0),))
    p_s = torch.randn(1, 2, dtype=torch.float64, requires_grad=True)
    p_t = torch.randn(1, 2, dtype=torch.float64, requires_grad=True)
    before = discriminative_loss(state, p_s, [0], p_t, [0], 0.5)
    before.backward()
    assert state.d_centers.centers.grad is None and not state.d_centers.centers.requires_grad
    state.d_centers.centers = state.d_centers.centers + 0.3
    after = discriminative_loss(state, p_s, [0], p_t, [0], 0.5)
    assert after.item() != before.item()
