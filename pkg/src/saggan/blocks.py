"""Differentiable building blocks: the AMSE residual block and spectral normalization.

The AMSE (average-maximum squeeze-and-excitation) block gates the output of a
residual transform channel-wise. Its squeeze statistic is the spatial mean plus
the spatial max of each channel, summed rather than concatenated.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

SN_EPS = 1e-12


# ----------------------------------------------------------------------------
# AMSE block
# ----------------------------------------------------------------------------


def squeeze(u: torch.Tensor) -> torch.Tensor:
    """Collapse the spatial dimensions of a ``(..., C, H, W)`` map to ``(..., C)``.

    Each channel contributes ``mean(U[p]) + max(U[p])``.
    """
    if u.dim() < 3:
        raise ValueError(f"expected (..., C, H, W), got shape {tuple(u.shape)}")
    if u.shape[-1] * u.shape[-2] == 0:
        raise ValueError("cannot squeeze a feature map with empty spatial extent")
    return u.mean(dim=(-2, -1)) + u.amax(dim=(-2, -1))


def make_transform(channels: int) -> nn.Sequential:
    """Residual transform: conv3x3, IN, ReLU, conv3x3, IN (channel count preserved)."""
    return nn.Sequential(
        nn.ReflectionPad2d(1),
        nn.Conv2d(channels, channels, kernel_size=3),
        nn.InstanceNorm2d(channels),
        nn.ReLU(inplace=True),
        nn.ReflectionPad2d(1),
        nn.Conv2d(channels, channels, kernel_size=3),
        nn.InstanceNorm2d(channels),
    )


class AMSEBlock(nn.Module):
    """Residual block whose branch is rescaled by AMSE channel gates.

    Args:
        channels: channel count C of input and output.
        reduction: bottleneck ratio r of the gating MLP; must divide C.
        transform: optional replacement for the residual transform. It must
            preserve the channel count.
    """

    def __init__(self, channels: int, reduction: int = 4, transform: Optional[nn.Module] = None):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be positive")
        if reduction < 1 or channels % reduction != 0:
            raise ValueError(f"reduction ratio {reduction} must be >= 1 and divide {channels}")
        self.channels = channels
        self.reduction = reduction
        self.transform = transform if transform is not None else make_transform(channels)
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return amse_forward(x, self)


def excite(z: torch.Tensor, block: AMSEBlock) -> torch.Tensor:
    """Channel gates ``sigmoid(fc2(relu(fc1(z))))``, each strictly inside (0, 1)."""
    if z.shape[-1] != block.fc1.in_features:
        raise ValueError(
            f"channel vector has length {z.shape[-1]}, block expects {block.fc1.in_features}"
        )
    return torch.sigmoid(block.fc2(F.relu(block.fc1(z))))


def amse_forward(
    x: torch.Tensor, block: AMSEBlock, gate: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """``gate * F_t(x) + x`` with the gate broadcast over height and width.

    ``gate`` overrides the excitation output; it must be broadcastable to
    ``(N, C)``. Used to pin the gates in tests.
    """
    u = block.transform(x)
    if u.shape != x.shape:
        raise ValueError(f"transform changed shape {tuple(x.shape)} -> {tuple(u.shape)}")
    z = excite(squeeze(u), block) if gate is None else gate.expand(u.shape[:-2])
    return z[..., None, None] * u + x


# ----------------------------------------------------------------------------
# Spectral normalization
# ----------------------------------------------------------------------------


class SpectralResult(NamedTuple):
    weight: torch.Tensor
    u: torch.Tensor
    sigma: torch.Tensor
    degenerate: bool


def _normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm().clamp_min(SN_EPS)


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_power_iterations: int = 1, eps: float = SN_EPS
) -> SpectralResult:
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` is flattened to ``(out_features, -1)``. ``u`` is the left
    singular vector estimate of length ``out_features``; the refined vector is
    returned rather than written in place. Gradients flow through ``weight``
    only, the iteration vectors are treated as constants.

    A (numerically) zero matrix yields ``weight`` unchanged and
    ``degenerate=True``.
    """
    if n_power_iterations < 0:
        raise ValueError("n_power_iterations must be >= 0")
    w2 = weight.reshape(weight.shape[0], -1)
    if u.shape != (w2.shape[0],):
        raise ValueError(f"u has shape {tuple(u.shape)}, expected ({w2.shape[0]},)")
    with torch.no_grad():
        wd = w2.detach()
        u = u.detach().clone()
        v = _normalize(wd.t() @ u)
        for _ in range(n_power_iterations):
            u_next = wd @ v
            if u_next.norm() < eps:
                break
            u = _normalize(u_next)
            v = _normalize(wd.t() @ u)
    sigma = torch.dot(u, w2 @ v)
    if sigma.detach().abs() < eps:
        warnings.warn("spectral_normalize: zero matrix, weight left unnormalized", RuntimeWarning)
        return SpectralResult(weight, u, sigma, True)
    return SpectralResult(weight / sigma, u, sigma, False)


class SNConv2d(nn.Conv2d):
    """Conv2d whose kernel is spectrally normalized on every forward pass.

    In training mode each forward pass runs ``n_power_iterations`` steps and
    persists the refined ``weight_u`` buffer. In eval mode the stored vector is
    used as-is, so evaluation never mutates state.
    """

    def __init__(self, *args, n_power_iterations: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self.n_power_iterations = n_power_iterations
        self.register_buffer("weight_u", _normalize(torch.randn(self.out_channels)))

    @torch.no_grad()
    def reset_u(self, n_iter: int = 50, generator: Optional[torch.Generator] = None) -> None:
        u = torch.randn(self.out_channels, generator=generator, dtype=self.weight.dtype)
        self.weight_u.copy_(spectral_normalize(self.weight, _normalize(u), n_iter).u)

    def normalized_weight(self) -> torch.Tensor:
        n_iter = self.n_power_iterations if self.training else 0
        res = spectral_normalize(self.weight, self.weight_u, n_iter)
        if self.training:
            with torch.no_grad():
                self.weight_u.copy_(res.u)
        return res.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.normalized_weight(), self.bias)
