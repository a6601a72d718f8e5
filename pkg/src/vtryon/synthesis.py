"""Try-on generator with TPS-warped garment skips, perceptual loss and the try-on objective."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .dataset import NUM_CLASSES
from .geometry import apply_tps, tps_grid
from .parsing import block_widths, unet_block


@dataclass
class TryOnConfig:
    ngf: int = 64
    hd_extra_block: bool = False


class TryOnGenerator(nn.Module):
    """Two-branch U-Net.

    Branch one encodes the flat garment; every feature map it hands to the
    decoder (skips and bottleneck) is resampled with the TPS grid of the
    current ``theta`` evaluated at that map's resolution. Branch two encodes
    pose, masked person image and one-hot parse.
    """

    def __init__(self, pose_channels: int = 18, config: TryOnConfig | None = None):
        super().__init__()
        self.config = config or TryOnConfig()
        self.n_blocks = 5 if self.config.hd_extra_block else 4
        widths = block_widths(self.config.ngf, self.n_blocks)
        self.pose_channels = pose_channels
        self.garment_encoder = self._encoder(3, widths)
        self.person_encoder = self._encoder(pose_channels + 3 + NUM_CLASSES, widths)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        c = 2 * widths[-1]
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(c, width, 2, stride=2))
            self.decoders.append(unet_block(3 * width, width))
            c = width
        self.head = nn.Conv2d(c, 3, 1)

    @staticmethod
    def _encoder(cin: int, widths: Sequence[int]) -> nn.ModuleList:
        blocks = nn.ModuleList()
        for width in widths:
            blocks.append(unet_block(cin, width))
            cin = width
        return blocks

    @staticmethod
    def _encode(blocks: nn.ModuleList, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for block in blocks:
            x = block(x)
            feats.append(x)
            x = F.max_pool2d(x, 2)
        feats.append(x)
        return feats

    def garment_features(self, garment: torch.Tensor, theta: torch.Tensor) -> list[torch.Tensor]:
        """Branch-one skips and bottleneck, each warped by TPS(theta) at its own size."""
        feats = self._encode(self.garment_encoder, garment)
        if theta.shape[0] != garment.shape[0]:
            raise ValueError(f"theta batch {theta.shape[0]} != garment batch {garment.shape[0]}")
        return [apply_tps(f, tps_grid(theta, f.shape[-2:])) for f in feats]

    def forward(self, garment, pose, agnostic, parse_onehot, theta):
        factor = 2 ** self.n_blocks
        if garment.shape[-2] % factor or garment.shape[-1] % factor:
            raise ValueError(f"input size {tuple(garment.shape[-2:])} must be divisible by {factor}")
        g = self.garment_features(garment, theta)
        p = self._encode(self.person_encoder, torch.cat([pose, agnostic, parse_onehot], dim=1))
        x = torch.cat([g[-1], p[-1]], dim=1)
        for up, dec, gs, ps in zip(self.ups, self.decoders, reversed(g[:-1]), reversed(p[:-1])):
            x = dec(torch.cat([up(x), gs, ps], dim=1))
        return (torch.tanh(self.head(x)) + 1) / 2


def generate(net: TryOnGenerator, garment, pose, agnostic, parse_onehot, theta) -> torch.Tensor:
    return net(garment, pose, agnostic, parse_onehot, theta)


class PerceptualExtractor(nn.Module):
    """Frozen multi-stage feature stack for the perceptual loss.

    By default a seeded random five-stage conv stack (hermetic, no downloads);
    ``from_vgg19`` loads the usual pretrained 19-layer stack from a local file.
    """

    def __init__(self, stages: Sequence[nn.Module] | None = None, seed: int = 0,
                 widths: Sequence[int] = (16, 32, 64, 64, 64), name: str | None = None):
        super().__init__()
        if stages is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                built, cin = [], 3
                for i, width in enumerate(widths):
                    layers = [] if i == 0 else [nn.AvgPool2d(2)]
                    layers += [nn.Conv2d(cin, width, 3, padding=1), nn.ReLU()]
                    built.append(nn.Sequential(*layers))
                    cin = width
            stages = built
            name = name or f"seeded-conv5-s{seed}"
        self.stages = nn.ModuleList(stages)
        self.name = name or "custom"
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    @classmethod
    def from_vgg19(cls, weights_path: str | Path) -> "PerceptualExtractor":
        from torchvision.models import vgg19

        features = vgg19().features
        state = torch.load(weights_path, map_location="cpu")
        features.load_state_dict({k.removeprefix("features."): v for k, v in state.items()
                                  if k.startswith("features.")} or state)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

        class _Normalize(nn.Module):
            def forward(self, x):
                return (x - mean.to(x)) / std.to(x)

        cuts = [(0, 2), (2, 7), (7, 12), (12, 21), (21, 30)]
        stages = [nn.Sequential(*([_Normalize()] if i == 0 else []), *features[a:b])
                  for i, (a, b) in enumerate(cuts)]
        return cls(stages, name="vgg19")


def perceptual_loss(generated: torch.Tensor, target: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    total = generated.new_zeros(())
    for fg, ft in zip(extractor(generated), extractor(target)):
        total = total + (fg - ft).abs().mean()
    return total


def tryon_loss(generated, target, adv_term=None, lambda_adv: float = 0.1,
               extractor: PerceptualExtractor | None = None):
    """L1 + perceptual + lambda_adv * adversarial. Returns (total, parts)."""
    if extractor is None:
        extractor = PerceptualExtractor()
    l1 = (generated - target).abs().mean()
    vgg = perceptual_loss(generated, target, extractor)
    adv = generated.new_zeros(()) if adv_term is None else adv_term
    total = l1 + vgg + lambda_adv * adv
    parts = {"l1": l1.detach(), "vgg": vgg.detach(), "adv": (lambda_adv * adv).detach()}
    return total, parts


# --------------------------------------------------------------------------
# image output


def to_uint8(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
        if image.ndim == 3 and image.shape[0] in (1, 3):
            image = image.transpose(1, 2, 0)
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: str | Path, image) -> None:
    Image.fromarray(to_uint8(image)).save(Path(path))


def save_grid_sheet(path: str | Path, rows: Sequence[Sequence], pad: int = 2) -> None:
    """Lay out rows of equally sized images (e.g. garment | model | result) in one PNG."""
    tiles = [[to_uint8(img) for img in row] for row in rows]
    h, w = tiles[0][0].shape[:2]
    n_cols = max(len(r) for r in tiles)
    sheet = np.full((len(tiles) * (h + pad) + pad, n_cols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y:y + h, x:x + w] = tile
    Image.fromarray(sheet).save(Path(path))
