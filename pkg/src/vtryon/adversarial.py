"""Pixel-level semantic-aware discriminator (PSAD) and the Patch / Binary / NoDisc baselines."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import NUM_CLASSES

FAKE_CHANNEL = NUM_CLASSES  # index 18 of the N + 1 outputs
REAL, FAKE = 0, 1           # channels of the binary pixel discriminator


class AdvMode(str, enum.Enum):
    PSAD = "psad"
    PATCH = "patch"
    BINARY = "binary"
    NONE = "none"


@dataclass
class PsadConfig:
    ndf: int = 64
    n_levels: int = 6


@dataclass
class PatchConfig:
    ndf: int = 64


def _lrelu():
    return nn.LeakyReLU(0.2, inplace=True)


class _Down(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(cin, cout, 3, 2, 1), _lrelu(),
                                  nn.Conv2d(cout, cout, 3, 1, 1), _lrelu())

    def forward(self, x):
        return self.body(x)


class _Up(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(cin + cskip, cout, 3, 1, 1), _lrelu(),
                                  nn.Conv2d(cout, cout, 3, 1, 1), _lrelu())

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.body(torch.cat([x, skip], dim=1))


class SemanticPixelDiscriminator(nn.Module):
    """U-Net segmenter with ``n_levels`` down and up blocks and a 1x1 output conv.

    ``out_channels`` is N + 1 = 19 for PSAD and 2 for the binary baseline.
    Strided convs round up, so any input size works and the output keeps it.
    """

    def __init__(self, in_channels: int = 3, out_channels: int = NUM_CLASSES + 1,
                 config: PsadConfig | None = None):
        super().__init__()
        config = config or PsadConfig()
        ndf = config.ndf
        widths = [ndf * min(2 ** i, 8) for i in range(config.n_levels + 1)]
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 1, 1), _lrelu())
        self.downs = nn.ModuleList(_Down(widths[i], widths[i + 1]) for i in range(config.n_levels))
        self.ups = nn.ModuleList(_Up(widths[i + 1], widths[i], widths[i]) for i in reversed(range(config.n_levels)))
        self.head = nn.Conv2d(widths[0], out_channels, 1)
        self.out_channels = out_channels

    def forward(self, x):
        skips = [self.stem(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        y = skips.pop()
        for up in self.ups:
            y = up(y, skips.pop())
        return self.head(y)


class PatchDiscriminator(nn.Module):
    """Three stride-2 and one stride-1 k4 conv, then a k4 conv to one score per patch."""

    def __init__(self, in_channels: int = 3, config: PatchConfig | None = None):
        super().__init__()
        ndf = (config or PatchConfig()).ndf
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, ndf, 4, 2, 1), _lrelu(),
            nn.Conv2d(ndf, ndf * 2, 4, 2, 1), nn.BatchNorm2d(ndf * 2), _lrelu(),
            nn.Conv2d(ndf * 2, ndf * 4, 4, 2, 1), nn.BatchNorm2d(ndf * 4), _lrelu(),
            # size-preserving stride-1 k4 convs: pad 1 before, 2 after
            nn.ZeroPad2d((1, 2, 1, 2)), nn.Conv2d(ndf * 4, ndf * 8, 4, 1), nn.BatchNorm2d(ndf * 8), _lrelu(),
            nn.ZeroPad2d((1, 2, 1, 2)), nn.Conv2d(ndf * 8, 1, 4, 1),
        )

    def forward(self, x):
        return self.model(x)


def build_discriminator(mode: AdvMode | str, psad: PsadConfig | None = None,
                        patch: PatchConfig | None = None) -> nn.Module | None:
    mode = AdvMode(mode)
    if mode == AdvMode.PSAD:
        return SemanticPixelDiscriminator(out_channels=NUM_CLASSES + 1, config=psad)
    if mode == AdvMode.BINARY:
        return SemanticPixelDiscriminator(out_channels=2, config=psad)
    if mode == AdvMode.PATCH:
        return PatchDiscriminator(config=patch)
    return None


# --------------------------------------------------------------------------
# losses; D is any callable image -> logits


Discriminator = Callable[[torch.Tensor], torch.Tensor]


def _check_weights(weights: torch.Tensor) -> torch.Tensor:
    weights = torch.as_tensor(weights)
    if weights.shape != (NUM_CLASSES,):
        raise ValueError(f"class weights must have length {NUM_CLASSES}, got {tuple(weights.shape)}")
    return weights


def _weighted_class_nll(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    log_p = F.log_softmax(logits, dim=1)
    picked = log_p.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    w = weights.to(log_p)[labels.long()]
    return -(w * picked).mean()


def psad_d_loss(D: Discriminator, real: torch.Tensor, fake: torch.Tensor, labels: torch.Tensor,
                weights: torch.Tensor, return_parts: bool = False):
    """Class-weighted (N+1)-way pixel cross-entropy: real pixels -> their parse
    class, generated pixels -> the fake channel. Pass ``fake`` detached."""
    weights = _check_weights(weights)
    real_term = _weighted_class_nll(D(real), labels, weights)
    fake_term = -F.log_softmax(D(fake), dim=1)[:, FAKE_CHANNEL].mean()
    total = real_term + fake_term
    if return_parts:
        return total, {"real": real_term.detach(), "fake": fake_term.detach()}
    return total


def psad_g_loss(D: Discriminator, fake: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Generator side: push every generated pixel toward its true semantic class."""
    return _weighted_class_nll(D(fake), labels, _check_weights(weights))


def patch_d_loss(D: Discriminator, real, fake) -> torch.Tensor:
    return 0.5 * ((D(real) - 1).pow(2).mean() + D(fake).pow(2).mean())


def patch_g_loss(D: Discriminator, fake) -> torch.Tensor:
    return (D(fake) - 1).pow(2).mean()


def patch_losses(D: Discriminator, real, fake):
    """Least-squares GAN losses over the patch score map: (d_loss, g_loss)."""
    return patch_d_loss(D, real, fake.detach()), patch_g_loss(D, fake)


def binary_d_loss(D: Discriminator, real, fake) -> torch.Tensor:
    real_term = -F.log_softmax(D(real), dim=1)[:, REAL].mean()
    fake_term = -F.log_softmax(D(fake), dim=1)[:, FAKE].mean()
    return real_term + fake_term


def binary_g_loss(D: Discriminator, fake) -> torch.Tensor:
    return -F.log_softmax(D(fake), dim=1)[:, REAL].mean()


def binary_losses(D: Discriminator, real, fake):
    """Per-pixel real/fake cross-entropy: (d_loss, g_loss)."""
    return binary_d_loss(D, real, fake.detach()), binary_g_loss(D, fake)


def discriminator_loss(mode: AdvMode | str, D, real, fake, labels=None, weights=None) -> torch.Tensor:
    mode = AdvMode(mode)
    if mode == AdvMode.PSAD:
        return psad_d_loss(D, real, fake, labels, weights)
    if mode == AdvMode.BINARY:
        return binary_d_loss(D, real, fake)
    if mode == AdvMode.PATCH:
        return patch_d_loss(D, real, fake)
    raise ValueError("no discriminator loss without a discriminator")


def generator_adv_loss(mode: AdvMode | str, D, fake, labels=None, weights=None) -> torch.Tensor:
    mode = AdvMode(mode)
    if mode == AdvMode.PSAD:
        return psad_g_loss(D, fake, labels, weights)
    if mode == AdvMode.BINARY:
        return binary_g_loss(D, fake)
    if mode == AdvMode.PATCH:
        return patch_g_loss(D, fake)
    return fake.new_zeros(())
