"""Human parsing estimation: a U-Net over (warped garment, pose, masked parse)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import NUM_CLASSES


@dataclass
class ParseNetConfig:
    ngf: int = 64
    hd_extra_block: bool = False


def unet_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.InstanceNorm2d(cout, affine=True), nn.ReLU(inplace=True),
    )


def block_widths(ngf: int, n_blocks: int) -> list[int]:
    return [ngf * min(2 ** i, 8) for i in range(n_blocks)]


class UNet(nn.Module):
    """Encoder blocks each followed by 2x2 max pooling; decoder blocks preceded by
    a stride-2 transposed conv and fed the matching encoder output.

    Inputs whose sides are not multiples of 2**n_blocks are zero-padded at the
    bottom/right and the output is cropped back.
    """

    def __init__(self, in_channels: int, out_channels: int, ngf: int = 64, n_blocks: int = 4):
        super().__init__()
        widths = block_widths(ngf, n_blocks)
        self.encoders = nn.ModuleList()
        c = in_channels
        for width in widths:
            self.encoders.append(unet_block(c, width))
            c = width
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(c, width, 2, stride=2))
            self.decoders.append(unet_block(2 * width, width))
            c = width
        self.head = nn.Conv2d(c, out_channels, 1)
        self.n_blocks = n_blocks

    def forward(self, x):
        h, w = x.shape[-2:]
        factor = 2 ** self.n_blocks
        x = F.pad(x, (0, -w % factor, 0, -h % factor))
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)[..., :h, :w]


class ParseNet(nn.Module):
    def __init__(self, pose_channels: int = 18, config: ParseNetConfig | None = None):
        super().__init__()
        self.config = config or ParseNetConfig()
        self.pose_channels = pose_channels
        self.in_channels = 3 + pose_channels + NUM_CLASSES
        n_blocks = 5 if self.config.hd_extra_block else 4
        self.unet = UNet(self.in_channels, NUM_CLASSES, self.config.ngf, n_blocks)

    def forward(self, warped_garment, pose, masked_parse_onehot):
        if pose.shape[1] != self.pose_channels:
            raise ValueError(f"expected {self.pose_channels} pose channels, got {pose.shape[1]}")
        if masked_parse_onehot.shape[1] != NUM_CLASSES:
            raise ValueError(f"expected {NUM_CLASSES} parse channels, got {masked_parse_onehot.shape[1]}")
        return self.unet(torch.cat([warped_garment, pose, masked_parse_onehot], dim=1))


def predict_parse(net: ParseNet, warped_garment, pose, masked_parse_onehot) -> torch.Tensor:
    return net(warped_garment, pose, masked_parse_onehot)


def parse_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy against hard labels."""
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ValueError(f"parse labels must lie in [0, {NUM_CLASSES - 1}]")
    return F.cross_entropy(logits, labels.long())


def one_hot_parse(x: torch.Tensor) -> torch.Tensor:
    """One-hot (B, 18, H, W) from logits (B, 18, H, W) or labels (B, H, W).

    Ties in the logits go to the lowest class index.
    """
    labels = x.argmax(dim=1) if x.dim() == 4 else x.long()
    return F.one_hot(labels, NUM_CLASSES).permute(0, 3, 1, 2).to(torch.float32)


def pixel_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return (logits.argmax(dim=1) == labels).float().mean().item()
