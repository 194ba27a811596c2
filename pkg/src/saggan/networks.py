"""The six networks: two generators, two attention networks, two discriminators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional

import numpy as np
import torch
import torch.nn as nn

from .blocks import AMSEBlock, SNConv2d


def _check_spatial(x: torch.Tensor, image_size: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"{who}: expected (N, 1, H, W), got {tuple(x.shape)}")
    if x.shape[-2:] != (image_size, image_size):
        raise ValueError(
            f"{who}: input is {x.shape[-2]}x{x.shape[-1]}, network built for "
            f"{image_size}x{image_size}"
        )


class Generator(nn.Module):
    """CycleGAN-style translator with AMSE residual blocks.

    c7s1-f, d2f, d4f, K x AMSE(4f), u2f, uf, c7s1-1, tanh.
    """

    def __init__(self, image_size: int = 64, ngf: int = 32, n_blocks: int = 4, reduction: int = 4):
        super().__init__()
        self.image_size = image_size
        c = 4 * ngf
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, ngf, 7),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(inplace=True),
            nn.Conv2d(ngf, 2 * ngf, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * ngf),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * ngf, c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[AMSEBlock(c, reduction) for _ in range(n_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c, 2 * ngf, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * ngf),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * ngf, ngf, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(ngf, 1, 7),
            nn.Tanh(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x, self.image_size, "generator")
        return self.decoder(self.blocks(self.encoder(x)))


def _conv_in_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.InstanceNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _up_in_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class AttentionNet(nn.Module):
    """Three-level encoder-decoder with skip connections and a sigmoid head."""

    def __init__(self, image_size: int = 64, widths: tuple = (16, 32, 64)):
        super().__init__()
        w1, w2, w3 = widths
        self.image_size = image_size
        self.enc1 = _conv_in_relu(1, w1)
        self.enc2 = _conv_in_relu(w1, w2, stride=2)
        self.enc3 = _conv_in_relu(w2, w3, stride=2)
        self.up2 = _up_in_relu(w3, w2)
        self.dec2 = _conv_in_relu(2 * w2, w2)
        self.up1 = _up_in_relu(w2, w1)
        self.dec1 = _conv_in_relu(2 * w1, w1)
        self.head = nn.Conv2d(w1, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x, self.image_size, "attention")
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.head(d1))


class Discriminator(nn.Module):
    """Spectrally normalized patch discriminator (70x70 receptive field at n_layers=3).

    Returns per-patch probabilities; :meth:`logits` exposes the raw scores.
    """

    def __init__(self, ndf: int = 32, n_layers: int = 3, n_power_iterations: int = 1):
        super().__init__()
        sn = dict(n_power_iterations=n_power_iterations)
        layers = [SNConv2d(1, ndf, 4, stride=2, padding=1, **sn), nn.LeakyReLU(0.2, inplace=True)]
        mult = 1
        for i in range(1, n_layers):
            prev, mult = mult, min(2**i, 8)
            layers += [
                SNConv2d(ndf * prev, ndf * mult, 4, stride=2, padding=1, **sn),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        prev, mult = mult, min(2**n_layers, 8)
        layers += [
            SNConv2d(ndf * prev, ndf * mult, 4, stride=1, padding=1, **sn),
            nn.LeakyReLU(0.2, inplace=True),
            SNConv2d(ndf * mult, 1, 4, stride=1, padding=1, **sn),
        ]
        self.model = nn.Sequential(*layers)
        self.n_layers = n_layers

    def output_size(self, size: int) -> int:
        for _ in range(self.n_layers):
            size = (size + 2 - 4) // 2 + 1
        for _ in range(2):
            size = size + 2 - 4 + 1
        return size

    def sn_convs(self) -> Iterator[SNConv2d]:
        return (m for m in self.modules() if isinstance(m, SNConv2d))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"discriminator: expected (N, 1, H, W), got {tuple(x.shape)}")
        if self.output_size(min(x.shape[-2:])) < 1:
            raise ValueError(
                f"discriminator: input {x.shape[-2]}x{x.shape[-1]} smaller than receptive field"
            )
        return self.model(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


# ----------------------------------------------------------------------------
# Model state
# ----------------------------------------------------------------------------

NETWORK_NAMES = ("g_nt", "g_tn", "a_n", "a_t", "d_t", "d_n")


@dataclass
class ModelState:
    """Networks, optimizers and bookkeeping for one GAN training run.

    ``g_nt``/``g_tn`` translate normal->tumor and tumor->normal, ``a_n``/``a_t``
    are the attention networks applied to normal and tumor inputs, and
    ``d_t``/``d_n`` judge masked tumor-domain and normal-domain images.
    """

    config: "object"
    g_nt: Generator
    g_tn: Generator
    a_n: AttentionNet
    a_t: AttentionNet
    d_t: Discriminator
    d_n: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    extras: dict = field(default_factory=dict)

    def networks(self) -> Dict[str, nn.Module]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def generator_side(self):
        return [self.g_nt, self.g_tn, self.a_n, self.a_t]

    def discriminators(self):
        return [self.d_t, self.d_n]

    def train(self, mode: bool = True) -> "ModelState":
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self) -> "ModelState":
        return self.train(False)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """normal(0, 0.02) for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def validate_model_config(config) -> None:
    for key in ("image_size", "ngf", "ndf", "n_blocks", "reduction", "sn_power_iterations"):
        if getattr(config, key) <= 0:
            raise ValueError(f"{key} must be positive, got {getattr(config, key)}")
    if config.image_size % 4 != 0:
        raise ValueError(f"image_size {config.image_size} is not divisible by 4")
    if (4 * config.ngf) % config.reduction != 0:
        raise ValueError(f"reduction {config.reduction} does not divide {4 * config.ngf} channels")


def build_models(config) -> ModelState:
    """Freshly initialized networks and optimizers for ``config`` (a ``TrainConfig``)."""
    validate_model_config(config)
    gen = torch.Generator().manual_seed(int(config.seed))
    nets = {
        "g_nt": Generator(config.image_size, config.ngf, config.n_blocks, config.reduction),
        "g_tn": Generator(config.image_size, config.ngf, config.n_blocks, config.reduction),
        "a_n": AttentionNet(config.image_size, tuple(config.attention_widths)),
        "a_t": AttentionNet(config.image_size, tuple(config.attention_widths)),
        "d_t": Discriminator(config.ndf, n_power_iterations=config.sn_power_iterations),
        "d_n": Discriminator(config.ndf, n_power_iterations=config.sn_power_iterations),
    }
    for name in NETWORK_NAMES:
        init_weights(nets[name], gen)
    for name in ("d_t", "d_n"):
        for conv in nets[name].sn_convs():
            conv.reset_u(n_iter=50, generator=gen)
    betas = (config.beta1, config.beta2)
    g_params = [p for n in ("g_nt", "g_tn", "a_n", "a_t") for p in nets[n].parameters()]
    d_params = [p for n in ("d_t", "d_n") for p in nets[n].parameters()]
    return ModelState(
        config=config,
        opt_g=torch.optim.Adam(g_params, lr=config.learning_rate, betas=betas),
        opt_d=torch.optim.Adam(d_params, lr=config.learning_rate, betas=betas),
        rng=np.random.default_rng(int(config.seed)),
        **nets,
    )


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def generator_param_count(ngf: int, n_blocks: int, reduction: int) -> int:
    """Closed-form parameter count of :class:`Generator`."""
    c = 4 * ngf
    h = c // reduction
    stem = 49 * ngf + ngf
    down = (9 * ngf * 2 * ngf + 2 * ngf) + (9 * 2 * ngf * c + c)
    amse = 2 * (9 * c * c + c) + (c * h + h) + (h * c + c)
    up = (9 * c * 2 * ngf + 2 * ngf) + (9 * 2 * ngf * ngf + ngf)
    head = 49 * ngf + 1
    return stem + down + n_blocks * amse + up + head


def attention_param_count(widths: tuple) -> int:
    w1, w2, w3 = widths
    conv = lambda cin, cout, k=3: k * k * cin * cout + cout  # noqa: E731
    return (
        conv(1, w1) + conv(w1, w2) + conv(w2, w3)
        + conv(w3, w2) + conv(2 * w2, w2)
        + conv(w2, w1) + conv(2 * w1, w1)
        + conv(w1, 1, 1)
    )


def discriminator_param_count(ndf: int, n_layers: int = 3) -> int:
    conv = lambda cin, cout: 16 * cin * cout + cout  # noqa: E731
    total = conv(1, ndf)
    mult = 1
    for i in range(1, n_layers):
        prev, mult = mult, min(2**i, 8)
        total += conv(ndf * prev, ndf * mult)
    prev, mult = mult, min(2**n_layers, 8)
    return total + conv(ndf * prev, ndf * mult) + conv(ndf * mult, 1)


def model_param_count(config) -> int:
    """Total trainable parameters of all six networks."""
    return 2 * (
        generator_param_count(config.ngf, config.n_blocks, config.reduction)
        + attention_param_count(tuple(config.attention_widths))
        + discriminator_param_count(config.ndf)
    )


def spectral_bounds(net: Discriminator) -> Dict[str, float]:
    """Top singular value (full SVD) of every normalized kernel, keyed by module name."""
    out = {}
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for name, m in net.named_modules():
            if isinstance(m, SNConv2d):
                w = m.normalized_weight()
                out[name] = float(torch.linalg.svdvals(w.reshape(w.shape[0], -1))[0])
    net.train(was_training)
    return out


def generator_forward(x: torch.Tensor, net: Generator) -> torch.Tensor:
    return net(x)


def attention_forward(x: torch.Tensor, net: AttentionNet) -> torch.Tensor:
    return net(x)


def discriminator_forward(x_masked: torch.Tensor, net: Discriminator) -> torch.Tensor:
    return net(x_masked)
