import pytest
import torch

from saggan.networks import (
    AttentionNet,
    Discriminator,
    Generator,
    attention_param_count,
    build_models,
    count_parameters,
    discriminator_param_count,
    generator_param_count,
    init_weights,
    model_param_count,
    spectral_bounds,
)
from saggan.training import TrainConfig

from conftest import central_difference


def test_generator_shape_and_range():
    torch.manual_seed(0)
    g = Generator(64)
    y = g(torch.rand(2, 1, 64, 64) * 2 - 1)
    assert y.shape == (2, 1, 64, 64)
    assert y.abs().max() <= 1


def test_generator_deterministic():
    torch.manual_seed(0)
    g = Generator(32, ngf=8, n_blocks=2).eval()
    x = torch.randn(1, 1, 32, 32)
    assert torch.equal(g(x), g(x))


def test_generator_rejects_wrong_size():
    with pytest.raises(ValueError, match="64"):
        Generator(64)(torch.zeros(1, 1, 32, 32))


def test_generator_input_gradient_spot_check():
    torch.manual_seed(0)
    g = Generator(32, ngf=4, n_blocks=1, reduction=2).double()
    init_weights(g, torch.Generator().manual_seed(0))
    x = (torch.rand(1, 1, 32, 32, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    g(x).mean().backward()
    grad = x.grad.clone()
    assert torch.isfinite(grad).all() and grad.abs().max() > 0
    with torch.no_grad():
        for idx in [(0, 0, 3, 4), (0, 0, 16, 16), (0, 0, 30, 1)]:
            old = x[idx].item()
            x[idx] = old + 1e-5
            hi = g(x).mean().item()
            x[idx] = old - 1e-5
            lo = g(x).mean().item()
            x[idx] = old
            numeric = (hi - lo) / 2e-5
            assert numeric == pytest.approx(grad[idx].item(), rel=1e-4, abs=1e-10)


def test_attention_shape_range_and_neutral_head():
    torch.manual_seed(0)
    a = AttentionNet(32, (4, 8, 8))
    m = a(torch.randn(3, 1, 32, 32))
    assert m.shape == (3, 1, 32, 32)
    assert torch.all((m >= 0) & (m <= 1))
    torch.nn.init.zeros_(a.head.weight)
    torch.nn.init.zeros_(a.head.bias)
    assert torch.equal(a(torch.randn(1, 1, 32, 32)), torch.full((1, 1, 32, 32), 0.5))


def test_attention_gradient_matches_finite_differences():
    torch.manual_seed(2)
    a = AttentionNet(32, (2, 2, 2)).double()
    x = torch.randn(1, 1, 32, 32, dtype=torch.float64)
    a.zero_grad()
    a(x).sum().backward()
    with torch.no_grad():
        numeric = central_difference(lambda: a(x).sum(), a.head.weight)
    assert torch.allclose(a.head.weight.grad, numeric, rtol=1e-4, atol=1e-8)


def test_discriminator_patch_grid():
    d = Discriminator(8)
    assert d(torch.zeros(1, 1, 64, 64)).shape == (1, 1, 6, 6)
    assert d.output_size(64) == 6


def test_discriminator_zero_weights_gives_half():
    d = Discriminator(8)
    for p in d.parameters():
        torch.nn.init.zeros_(p)
    # zero kernels are degenerate for spectral normalization; they pass through unscaled
    with pytest.warns(RuntimeWarning):
        out = d(torch.randn(1, 1, 64, 64))
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_discriminator_too_small_input():
    with pytest.raises(ValueError):
        Discriminator(8).logits(torch.zeros(1, 1, 8, 8))


def test_discriminator_spectral_bound_after_normalization():
    torch.manual_seed(0)
    d = Discriminator(8, n_power_iterations=1)
    for conv in d.sn_convs():
        conv.reset_u(50)
    d(torch.randn(1, 1, 64, 64))
    assert max(spectral_bounds(d).values()) <= 1.02


def test_generator_param_count_closed_form():
    assert generator_param_count(32, 4, 4) == 1_401_857
    assert count_parameters(Generator(64)) == 1_401_857
    for ngf, k, r in [(4, 1, 2), (8, 2, 4), (16, 3, 8)]:
        assert count_parameters(Generator(32, ngf, k, r)) == generator_param_count(ngf, k, r)


def test_other_param_counts_closed_form():
    assert count_parameters(AttentionNet(64)) == attention_param_count((16, 32, 64))
    assert count_parameters(Discriminator(32)) == discriminator_param_count(32)


def test_build_models_counts_and_determinism():
    cfg = TrainConfig(image_size=32, ngf=4, ndf=4, n_blocks=1, reduction=2, attention_widths=(4, 4, 4))
    a, b = build_models(cfg), build_models(cfg)
    assert sum(count_parameters(n) for n in a.networks().values()) == model_param_count(cfg)
    for (name, na), nb in zip(a.networks().items(), b.networks().values()):
        for pa, pb in zip(na.state_dict().values(), nb.state_dict().values()):
            assert torch.equal(pa, pb), name


def test_default_model_total_params():
    assert model_param_count(TrainConfig()) == 4_329_126


def test_image_size_must_be_divisible_by_four():
    with pytest.raises(ValueError, match="image_size"):
        TrainConfig(image_size=63)
