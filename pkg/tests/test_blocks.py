import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from saggan.blocks import AMSEBlock, SNConv2d, amse_forward, excite, spectral_normalize, squeeze

from conftest import central_difference, rel_error

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False, width=64)


def test_squeeze_constant_is_twice_value():
    u = torch.full((3, 4, 5), 1.75)
    assert torch.equal(squeeze(u), torch.full((3,), 3.5))


def test_squeeze_zero():
    assert torch.equal(squeeze(torch.zeros(2, 3, 3)), torch.zeros(2))


def test_squeeze_brute_force_values():
    u = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    vals = [1.0, 2.0, 3.0, 4.0]
    expected = sum(vals) / len(vals) + max(vals)
    assert expected == 6.5
    assert squeeze(u).item() == pytest.approx(expected)


def test_squeeze_rejects_empty_spatial():
    with pytest.raises(ValueError):
        squeeze(torch.zeros(2, 0, 3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3, 3), elements=finite), st.permutations(range(4)))
def test_squeeze_channel_permutation_equivariant(u, perm):
    u = torch.from_numpy(u)
    perm = list(perm)
    assert torch.allclose(squeeze(u[perm]), squeeze(u)[perm])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 2), elements=finite))
def test_squeeze_bounds(u):
    z = squeeze(torch.from_numpy(u)).numpy()
    lo = 2 * u.reshape(3, -1).min(axis=1)
    hi = 2 * u.reshape(3, -1).max(axis=1)
    assert np.all(z >= lo - 1e-9) and np.all(z <= hi + 1e-9)


def _zero_block(channels=4, reduction=2):
    block = AMSEBlock(channels, reduction)
    for p in block.parameters():
        torch.nn.init.zeros_(p)
    return block


def test_excite_zero_network_gives_half():
    g = excite(torch.randn(5, 4), _zero_block())
    assert torch.equal(g, torch.full((5, 4), 0.5))


def test_excite_identity_example():
    block = AMSEBlock(2, 1)
    with torch.no_grad():
        block.fc1.weight.copy_(torch.eye(2))
        block.fc2.weight.copy_(torch.eye(2))
        block.fc1.bias.zero_()
        block.fc2.bias.zero_()
    gates = excite(torch.tensor([1.0, -1.0]), block)
    # sigmoid(relu(1)), sigmoid(relu(-1))
    expected = torch.tensor([1 / (1 + math.exp(-1)), 0.5])
    assert torch.allclose(gates, expected, atol=1e-6)
    assert gates[0].item() == pytest.approx(0.7311, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (8,), elements=st.floats(-1e3, 1e3, width=32)), st.integers(0, 2**16))
def test_excite_in_open_unit_interval(z, seed):
    torch.manual_seed(seed)
    block = AMSEBlock(8, 2)
    g = excite(torch.from_numpy(z).double(), block.double())
    assert torch.all(g >= 0) and torch.all(g <= 1)
    # strictly inside for moderate pre-activations
    g_small = excite(torch.from_numpy(z).double() * 1e-3, block)
    assert torch.all(g_small > 0) and torch.all(g_small < 1)


def test_excite_shape_mismatch():
    with pytest.raises(ValueError):
        excite(torch.zeros(3), AMSEBlock(4, 2))


def test_amse_invalid_reduction():
    with pytest.raises(ValueError):
        AMSEBlock(6, 4)


def test_amse_zero_gate_is_identity():
    torch.manual_seed(0)
    block = AMSEBlock(4, 2)
    x = torch.randn(2, 4, 6, 6)
    assert torch.equal(amse_forward(x, block, gate=torch.zeros(1)), x)


def test_amse_full_gate_is_plain_residual():
    torch.manual_seed(0)
    block = AMSEBlock(4, 2)
    x = torch.randn(2, 4, 6, 6)
    assert torch.allclose(amse_forward(x, block, gate=torch.ones(1)), block.transform(x) + x)


def test_amse_channel_mismatch():
    block = AMSEBlock(4, 2, transform=torch.nn.Conv2d(4, 2, 1))
    with pytest.raises(ValueError):
        block(torch.randn(1, 4, 3, 3))


def test_amse_gradients_match_finite_differences():
    torch.manual_seed(1)
    block = AMSEBlock(4, 2).double()
    x = torch.randn(1, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    # a random projection; a plain sum is invariant under the instance norms
    probe = torch.randn(1, 4, 5, 5, dtype=torch.float64)
    f = lambda: (block(x) * probe).sum()  # noqa: E731
    for name, p in [("x", x), *block.named_parameters()]:
        block.zero_grad()
        x.grad = None
        f().backward()
        analytic = p.grad.clone()
        with torch.no_grad():
            numeric = central_difference(f, p)
        # conv biases ahead of an instance norm have an exactly zero gradient
        assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-8), name


# ----------------------------------------------------------------------------
# spectral normalization
# ----------------------------------------------------------------------------


def test_sn_identity():
    res = spectral_normalize(torch.eye(5, dtype=torch.float64), torch.ones(5, dtype=torch.float64) / 5**0.5)
    assert torch.allclose(res.weight, torch.eye(5, dtype=torch.float64), atol=1e-12)
    assert res.sigma.item() == pytest.approx(1.0)


def test_sn_diagonal():
    w = torch.diag(torch.tensor([2.0, 1.0], dtype=torch.float64))
    u = torch.tensor([0.6, 0.8], dtype=torch.float64)
    res = spectral_normalize(w, u, n_power_iterations=20)
    expected = torch.diag(torch.tensor([1.0, 0.5], dtype=torch.float64))
    assert (res.weight - expected).abs().max() < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_sn_random_matrix_svd_oracle(seed):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(8, 8, generator=gen, dtype=torch.float64)
    u = torch.randn(8, generator=gen, dtype=torch.float64)
    res = spectral_normalize(w, u / u.norm(), n_power_iterations=50)
    top = torch.linalg.svdvals(res.weight)[0].item()
    assert abs(top - 1) < 0.01
    assert abs(res.u.norm().item() - 1) < 1e-5


def test_sn_zero_matrix_is_flagged():
    w = torch.zeros(3, 4)
    with pytest.warns(RuntimeWarning):
        res = spectral_normalize(w, torch.ones(3) / 3**0.5, 5)
    assert res.degenerate
    assert torch.equal(res.weight, w)
    assert abs(res.u.norm().item() - 1) < 1e-5


def test_sn_conv_kernel_shape_restored():
    gen = torch.Generator().manual_seed(2)
    w = torch.randn(6, 3, 4, 4, generator=gen, dtype=torch.float64)
    u = torch.randn(6, generator=gen, dtype=torch.float64)
    res = spectral_normalize(w, u / u.norm(), 100)
    assert res.weight.shape == w.shape
    assert torch.linalg.svdvals(res.weight.reshape(6, -1))[0].item() == pytest.approx(1.0, abs=1e-3)


def test_sn_rejects_wrong_u_length():
    with pytest.raises(ValueError):
        spectral_normalize(torch.eye(3), torch.ones(4))


def test_sn_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(3)
    # well separated top singular value so the iteration converges fully
    w = torch.randn(4, 5, generator=gen, dtype=torch.float64)
    w[0, 0] += 5.0
    u0 = torch.randn(4, generator=gen, dtype=torch.float64)
    u0 = u0 / u0.norm()
    probe = torch.randn(4, 5, generator=gen, dtype=torch.float64)
    w.requires_grad_(True)
    f = lambda: (spectral_normalize(w, u0, 200).weight * probe).sum()  # noqa: E731
    f().backward()
    with torch.no_grad():
        numeric = central_difference(f, w)
    assert rel_error(w.grad, numeric) < 1e-4


def test_snconv_updates_u_only_in_training():
    torch.manual_seed(0)
    conv = SNConv2d(2, 3, 3, n_power_iterations=1)
    x = torch.randn(1, 2, 5, 5)
    conv.eval()
    before = conv.weight_u.clone()
    conv(x)
    assert torch.equal(conv.weight_u, before)
    conv.train()
    conv(x)
    assert not torch.equal(conv.weight_u, before)
    assert abs(conv.weight_u.norm().item() - 1) < 1e-5
