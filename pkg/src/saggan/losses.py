"""Attention-gated composition and the training losses, as pure functions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn

PROB_EPS = 1e-7

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 1.0
    lambda_cyc: float = 10.0

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_cyc"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class LossBundle:
    """Generator-side loss terms of one step. ``d_t``/``d_n`` are the discriminator losses."""

    adv_N: float
    adv_T: float
    cycle: float
    attn_sup: float
    total: float
    d_t: float = float("nan")
    d_n: float = float("nan")

    HISTORY_FIELDS = ("adv_N", "adv_T", "cycle", "attn_sup", "total")

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.HISTORY_FIELDS}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component


def _same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def compose(input_img: torch.Tensor, gen_img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Foreground from ``gen_img`` where ``mask`` is high, background from ``input_img``."""
    _same_shape(input_img, gen_img, mask)
    return mask * gen_img + (1 - mask) * input_img


def _log_prob(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_EPS, 1 - PROB_EPS))


def _probs(x: torch.Tensor, d: Optional[nn.Module]) -> torch.Tensor:
    # With d=None the input already holds discriminator probabilities.
    return x if d is None else d(x)


def adv_loss_discriminator(
    real_masked: torch.Tensor, fake_masked: torch.Tensor, d: Optional[nn.Module] = None
) -> torch.Tensor:
    """``-mean log D(real) - mean log(1 - D(fake))`` over patches and batch."""
    p_real = _probs(real_masked, d)
    p_fake = _probs(fake_masked, d)
    return -_log_prob(p_real).mean() - _log_prob(1 - p_fake).mean()


def adv_loss_generator(fake_masked: torch.Tensor, d: Optional[nn.Module] = None) -> torch.Tensor:
    """Non-saturating generator loss ``-mean log D(fake)``."""
    return -_log_prob(_probs(fake_masked, d)).mean()


def cycle_loss(
    n: torch.Tensor, n_rec: torch.Tensor, t: torch.Tensor, t_rec: torch.Tensor
) -> torch.Tensor:
    _same_shape(n, n_rec)
    _same_shape(t, t_rec)
    return (n_rec - n).abs().mean() + (t_rec - t).abs().mean()


def attention_supervision_loss(seg_mask: torch.Tensor, pred_map: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean L1 between a binary lesion mask and the predicted tumor attention."""
    _same_shape(seg_mask, pred_map)
    with torch.no_grad():
        off = torch.minimum(seg_mask.abs(), (seg_mask - 1).abs())
        if off.numel() and float(off.max()) > 1e-6:
            raise ValueError("segmentation mask is not binary")
    return (seg_mask - pred_map).abs().mean()


def total_loss(
    adv_N: Number, adv_T: Number, cycle: Number, attn_sup: Number, w: LossWeights
) -> Number:
    parts = dict(adv_N=adv_N, adv_T=adv_T, cycle=cycle, attn_sup=attn_sup)
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    return w.lambda_gan * (adv_N + adv_T) + w.lambda_cyc * cycle + attn_sup
