"""Garment warping: thin-plate-spline grids, the correlation-based TPS regressor and the warp loss.

Coordinates follow ``grid_sample(align_corners=True)``: pixel column ``j`` of a
width-``W`` image sits at ``x = 2 j / (W - 1) - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

GRID_SIZE = 5
NUM_TPS_PARAMS = 2 * GRID_SIZE * GRID_SIZE
TPS_RIDGE = 1e-6


class TpsError(ValueError):
    pass


def anchor_lattice(grid_size: int = GRID_SIZE) -> np.ndarray:
    """Regular lattice over [-1, 1]^2, row-major, as (grid_size**2, 2) (x, y) pairs."""
    t = np.linspace(-1.0, 1.0, grid_size)
    ys, xs = np.meshgrid(t, t, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r2 * np.log(r2)
    return np.where(r2 > 0, out, 0.0)


def identity_points(size: tuple[int, int]) -> np.ndarray:
    h, w = size
    ys = 2 * np.arange(h) / (h - 1) - 1 if h > 1 else np.zeros(1)
    xs = 2 * np.arange(w) / (w - 1) - 1 if w > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@lru_cache(maxsize=32)
def _tps_basis(size: tuple[int, int], grid_size: int, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    """Identity points X (HW x 2) and the linear map M (HW x n) with grid = X + M @ offsets."""
    ctrl = anchor_lattice(grid_size)
    n = len(ctrl)
    d2 = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = _tps_kernel(d2) + ridge * np.eye(n)
    system[:n, n] = 1.0
    system[:n, n + 1:] = ctrl
    system[n, :n] = 1.0
    system[n + 1:, :n] = ctrl.T
    if np.linalg.matrix_rank(system) < n + 3:
        raise TpsError(f"singular TPS system for a {grid_size}x{grid_size} lattice")
    inverse = np.linalg.inv(system)
    pts = identity_points(size)
    phi = np.concatenate([
        _tps_kernel(((pts[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)),
        np.ones((len(pts), 1)), pts], axis=1)
    return pts, phi @ inverse[:, :n]


def tps_grid(theta: torch.Tensor, out_size: tuple[int, int], ridge: float = TPS_RIDGE) -> torch.Tensor:
    """Sampling grid (B, H, W, 2) for anchor offsets ``theta`` of shape (B, 2, 5, 5) or (B, 50).

    Anchors sit on the regular lattice; their images are lattice + theta, i.e.
    the grid holds source coordinates for every output pixel.
    """
    theta = theta.reshape(theta.shape[0], 2, -1)
    n = theta.shape[-1]
    grid_size = int(round(n ** 0.5))
    if grid_size * grid_size != n:
        raise TpsError(f"theta must hold 2 x k x k offsets, got {tuple(theta.shape)}")
    if not torch.isfinite(theta).all():
        raise TpsError(f"non-finite TPS parameters: {theta.detach().cpu().numpy().tolist()}")
    h, w = out_size
    pts, basis = _tps_basis((int(h), int(w)), grid_size, float(ridge))
    pts = torch.as_tensor(pts, dtype=theta.dtype, device=theta.device)
    basis = torch.as_tensor(basis, dtype=theta.dtype, device=theta.device)
    offsets = torch.einsum("pn,bcn->bpc", basis, theta)
    return (pts.unsqueeze(0) + offsets).reshape(theta.shape[0], h, w, 2)


def apply_tps(image: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear resampling with zero padding outside the source image."""
    if grid.dtype != image.dtype:
        grid = grid.to(image.dtype)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def warp(image: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    return apply_tps(image, tps_grid(theta, image.shape[-2:]))


def second_order_constraint(theta: torch.Tensor) -> torch.Tensor:
    """Squared second differences of the target lattice along rows and columns.

    Returns one value per sample for a batch (B, 2, 5, 5), a scalar for (2, 5, 5).
    The regular lattice is affine, so only the offsets contribute.
    """
    single = theta.dim() in (1, 3)
    t = theta.reshape(-1, 2, GRID_SIZE, GRID_SIZE)
    lattice = torch.as_tensor(anchor_lattice().T.reshape(2, GRID_SIZE, GRID_SIZE),
                              dtype=t.dtype, device=t.device)
    a = lattice + t
    along_rows = a[..., :, :-2] - 2 * a[..., :, 1:-1] + a[..., :, 2:]
    along_cols = a[..., :-2, :] - 2 * a[..., 1:-1, :] + a[..., 2:, :]
    total = along_rows.pow(2).sum(dim=(1, 2, 3)) + along_cols.pow(2).sum(dim=(1, 2, 3))
    return total[0] if single else total


def warp_loss(warped: torch.Tensor, target: torch.Tensor, theta: torch.Tensor,
              lambda_const: float = 0.01, return_parts: bool = False):
    if warped.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(warped.shape)} vs {tuple(target.shape)}")
    l1 = (warped - target).abs().mean()
    const = second_order_constraint(theta).mean()
    total = l1 + lambda_const * const
    if return_parts:
        return total, {"l1": l1.detach(), "const": const.detach()}
    return total


# --------------------------------------------------------------------------
# networks


@dataclass
class WarpNetConfig:
    ngf: int = 64
    hd_extra_downsample: bool = False
    normalize_features: bool = True


def conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _conv_bn(cin, cout, k, s, p):
    return [nn.Conv2d(cin, cout, k, s, p), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class FeatureExtractor(nn.Module):
    """Four (five in HD) stride-2 k4 convs followed by two stride-1 k3 convs."""

    def __init__(self, in_channels: int, ngf: int = 64, extra_downsample: bool = False):
        super().__init__()
        widths = [ngf, ngf * 2, ngf * 4, ngf * 8] + ([ngf * 8] if extra_downsample else [])
        layers, c = [], in_channels
        for width in widths:
            layers += _conv_bn(c, width, 4, 2, 1)
            c = width
        layers += _conv_bn(c, c, 3, 1, 1) + _conv_bn(c, c, 3, 1, 1)
        self.model = nn.Sequential(*layers)
        self.out_channels = c

    def forward(self, x):
        return self.model(x)


def correlation(feat_a: torch.Tensor, feat_b: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Similarity of every cell of ``feat_a`` with every cell of ``feat_b``.

    Output (B, h*w, h, w): channel indexes the ``feat_a`` cell, spatial position
    the ``feat_b`` cell.
    """
    if normalize:
        feat_a = F.normalize(feat_a, dim=1)
        feat_b = F.normalize(feat_b, dim=1)
    b, c, h, w = feat_a.shape
    corr = torch.einsum("bcs,bct->bst", feat_a.reshape(b, c, h * w), feat_b.reshape(b, c, h * w))
    return corr.reshape(b, h * w, h, w)


class TpsRegressor(nn.Module):
    def __init__(self, in_channels: int, in_size: tuple[int, int], ngf: int = 64):
        super().__init__()
        # padding 2 on the strided convs keeps tiny correlation maps alive
        self.conv = nn.Sequential(
            *_conv_bn(in_channels, ngf * 8, 4, 2, 2),
            *_conv_bn(ngf * 8, ngf * 4, 4, 2, 2),
            *_conv_bn(ngf * 4, ngf * 2, 3, 1, 1),
            *_conv_bn(ngf * 2, ngf, 3, 1, 1),
        )
        h, w = in_size
        for _ in range(2):
            h, w = conv_out(h, 4, 2, 2), conv_out(w, 4, 2, 2)
        self.fc = nn.Linear(ngf * h * w, NUM_TPS_PARAMS)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        return self.fc(self.conv(x).flatten(1))


class WarpNet(nn.Module):
    """Predicts TPS anchor offsets from garment ``c`` and person representation (``m``, ``p``)."""

    def __init__(self, image_size: tuple[int, int], pose_channels: int = 18,
                 config: WarpNetConfig | None = None):
        super().__init__()
        self.config = config or WarpNetConfig()
        self.image_size = tuple(image_size)
        ngf = self.config.ngf
        extra = self.config.hd_extra_downsample
        self.garment_features = FeatureExtractor(3, ngf, extra)
        self.person_features = FeatureExtractor(3 + pose_channels, ngf, extra)
        fh, fw = image_size
        for _ in range(5 if extra else 4):
            fh, fw = conv_out(fh, 4, 2, 1), conv_out(fw, 4, 2, 1)
        if fh < 1 or fw < 1:
            raise ValueError(f"image size {image_size} too small for the feature extractors")
        self.feature_size = (fh, fw)
        self.regressor = TpsRegressor(fh * fw, (fh, fw), ngf)

    def forward(self, garment, agnostic, pose):
        if not (garment.shape[-2:] == agnostic.shape[-2:] == pose.shape[-2:]):
            raise ValueError(f"spatial mismatch: garment {tuple(garment.shape[-2:])}, "
                             f"agnostic {tuple(agnostic.shape[-2:])}, pose {tuple(pose.shape[-2:])}")
        fa = self.garment_features(garment)
        fb = self.person_features(torch.cat([agnostic, pose], dim=1))
        corr = correlation(fa, fb, self.config.normalize_features)
        return self.regressor(corr).reshape(-1, 2, GRID_SIZE, GRID_SIZE)


def predict_tps(net: WarpNet, garment, agnostic, pose) -> torch.Tensor:
    return net(garment, agnostic, pose)


def theta_to_text(theta: torch.Tensor) -> str:
    """One 50-number whitespace-separated line per sample."""
    flat = theta.detach().reshape(theta.shape[0], -1).cpu().double().numpy()
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in flat)


def theta_from_text(text: str) -> torch.Tensor:
    rows = [[float(v) for v in line.split()] for line in text.strip().splitlines()]
    return torch.tensor(rows, dtype=torch.float64).reshape(len(rows), 2, GRID_SIZE, GRID_SIZE)
