import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from saggan.losses import (
    PROB_EPS,
    LossWeights,
    NonFiniteLossError,
    adv_loss_discriminator,
    adv_loss_generator,
    attention_supervision_loss,
    compose,
    cycle_loss,
    total_loss,
)

from conftest import central_difference

unit = st.floats(0, 1, allow_nan=False, width=64)
pixel = st.floats(-1, 1, allow_nan=False, width=64)


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_compose_examples():
    assert torch.equal(compose(t(-1.0), t(1.0), t(1.0)), t(1.0))
    assert torch.equal(compose(t(-1.0), t(1.0), t(0.0)), t(-1.0))
    assert compose(t(0.2), t(0.6), t(0.5)).item() == pytest.approx(0.4)


def test_compose_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        compose(torch.zeros(2, 2), torch.zeros(2, 2), torch.zeros(2, 3))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6,), elements=pixel), arrays(np.float64, (6,), elements=pixel),
       arrays(np.float64, (6,), elements=unit))
def test_compose_is_convex_combination(x, g, m):
    out = compose(*(torch.from_numpy(a) for a in (x, g, m))).numpy()
    lo, hi = np.minimum(x, g), np.maximum(x, g)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_disc_loss_example():
    # -log 0.9 - log(1 - 0.2)
    expected = -math.log(0.9) - math.log(0.8)
    assert expected == pytest.approx(0.3285, abs=1e-4)
    assert adv_loss_discriminator(t(0.9), t(0.2)).item() == pytest.approx(expected, abs=1e-6)


def test_disc_loss_at_equilibrium_is_two_ln2():
    p = torch.full((2, 1, 6, 6), 0.5, dtype=torch.float64)
    assert adv_loss_discriminator(p, p).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_gen_loss_examples():
    assert adv_loss_generator(t(0.55)).item() == pytest.approx(0.5978, abs=1e-4)
    assert adv_loss_generator(t(0.5, 0.5)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_probability_clamping_keeps_losses_finite():
    assert adv_loss_generator(t(0.0)).item() == pytest.approx(-math.log(PROB_EPS))
    assert math.isfinite(adv_loss_discriminator(t(0.0), t(1.0)).item())


def test_losses_through_discriminator_module():
    class Half(torch.nn.Module):
        def forward(self, x):
            return torch.full_like(x, 0.5)

    x = torch.randn(2, 1, 4, 4)
    assert adv_loss_generator(x, Half()).item() == pytest.approx(math.log(2), abs=1e-6)


def test_cycle_loss_examples():
    z = torch.zeros(1, 1, 4, 4)
    assert cycle_loss(z, z, z, z).item() == 0
    half = torch.full((1, 1, 4, 4), 0.5)
    assert cycle_loss(z, half, z, z).item() == pytest.approx(0.5)
    assert cycle_loss(z, half, z, half).item() == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4,), elements=pixel), arrays(np.float64, (4,), elements=pixel))
def test_cycle_loss_symmetric_and_nonnegative(a, b):
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    assert cycle_loss(a, b, a, a).item() >= 0
    assert cycle_loss(a, b, a, b).item() == pytest.approx(cycle_loss(b, a, b, a).item())


def test_attention_supervision_examples():
    seg = t(1.0, 0.0, 0.0, 1.0)
    assert attention_supervision_loss(seg, seg).item() == 0
    assert attention_supervision_loss(seg, t(0.5, 0.5, 0.5, 0.5)).item() == pytest.approx(0.5)
    assert attention_supervision_loss(seg, t(0.75, 0.25, 0.0, 1.0)).item() == pytest.approx(0.125)


def test_attention_supervision_rejects_soft_mask():
    with pytest.raises(ValueError, match="binary"):
        attention_supervision_loss(t(0.3), t(0.3))


def test_total_loss_example():
    w = LossWeights()
    assert total_loss(0.6, 0.7, 2.0, 0.1, w) == pytest.approx(1.3 + 20 + 0.1)
    assert total_loss(1, 1, 1, 1, LossWeights(2.0, 3.0)) == pytest.approx(2 * 2 + 3 + 1)


@pytest.mark.parametrize("bad", ["adv_N", "adv_T", "cycle", "attn_sup"])
def test_total_loss_names_nonfinite_component(bad):
    parts = dict(adv_N=1.0, adv_T=1.0, cycle=1.0, attn_sup=1.0)
    parts[bad] = float("nan")
    with pytest.raises(NonFiniteLossError, match=bad):
        total_loss(w=LossWeights(), **parts)


def test_loss_weights_validation():
    with pytest.raises(ValueError, match="lambda_cyc"):
        LossWeights(1.0, -1.0)
    with pytest.raises(ValueError, match="lambda_gan"):
        LossWeights(float("inf"), 1.0)


def test_loss_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(0)
    p = (torch.rand(2, 3, generator=gen, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    q = (torch.rand(2, 3, generator=gen, dtype=torch.float64) * 0.8 + 0.1)
    img = torch.rand(2, 3, generator=gen, dtype=torch.float64)
    for f in (
        lambda: adv_loss_discriminator(p, q),
        lambda: adv_loss_discriminator(q, p),
        lambda: adv_loss_generator(p),
        lambda: cycle_loss(img, p, img, img),
        lambda: compose(img, q, p).sum(),
    ):
        p.grad = None
        f().backward()
        with torch.no_grad():
            numeric = central_difference(f, p)
        assert torch.allclose(p.grad, numeric, rtol=1e-4, atol=1e-9)


def test_documented_examples():
    real, fake = t(0.8, 0.6), t(0.3, 0.1)
    # hand evaluation: 0.366985 + 0.231018
    assert adv_loss_discriminator(real, fake).item() == pytest.approx(0.598003, abs=1e-6)
    assert adv_loss_generator(t(0.25, 0.75)).item() == pytest.approx(0.836988, abs=1e-6)
    assert adv_loss_discriminator(t(1 - PROB_EPS), t(PROB_EPS)).item() == pytest.approx(0, abs=1e-6)
    assert compose(t(0.2), t(-0.6), t(0.25)).item() == pytest.approx(0.0, abs=1e-12)
    n, n_rec = t(0, 1, 1, 0).view(2, 2), t(1, 1, 0, 0).view(2, 2)
    assert cycle_loss(n, n_rec, n, n).item() == 0.5
    assert cycle_loss(n, n + 0.1, n, n).item() == pytest.approx(0.1)
    seg, pred = t(1, 0, 0, 0).view(2, 2), t(0.5, 0.5, 0, 0).view(2, 2)
    assert attention_supervision_loss(seg, pred).item() == 0.25
    assert attention_supervision_loss(t(1, 0), t(0, 1)).item() == 1.0
    assert total_loss(1, 1, 2, 3, LossWeights()) == 25


def test_zero_gan_weight_ignores_adversarial_terms():
    w = LossWeights(0.0, 10.0)
    assert total_loss(5.0, 7.0, 1.0, 0.5, w) == total_loss(0.1, 0.2, 1.0, 0.5, w)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, width=64), min_size=4, max_size=4),
       st.floats(0, 5, width=64), st.floats(0, 20, width=64))
def test_total_loss_linear_in_components(parts, lg, lc):
    w = LossWeights(lg, lc)
    coeffs = [lg, lg, lc, 1.0]
    h = 1e-3
    for i, c in enumerate(coeffs):
        up = list(parts)
        up[i] += h
        slope = (total_loss(*up, w) - total_loss(*parts, w)) / h
        assert slope == pytest.approx(c, rel=1e-6, abs=1e-6)
