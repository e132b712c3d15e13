"""Image encoders: the dense local feature map and global feature vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig


class ShapeError(ValueError):
    pass


@dataclass
class FeatureMap:
    """Local features ``tensor`` of shape (B, C, Hf, Wf) for images of ``image_size`` (H, W)."""
    tensor: torch.Tensor
    stride: int
    image_size: tuple

    def __post_init__(self):
        if self.tensor.dim() == 3:
            self.tensor = self.tensor.unsqueeze(0)
        _, c, h, w = self.tensor.shape
        if min(c, h, w) <= 0:
            raise ShapeError("empty feature map")
        H, W = self.image_size
        if h * self.stride != H or w * self.stride != W:
            raise ShapeError(f"feature grid {h}x{w} at stride {self.stride} does not tile a {H}x{W} image")

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]


@dataclass
class GlobalFeature:
    vector: torch.Tensor
    provenance: str  # whole-image | instance-crop | pooled-roi

    def __post_init__(self):
        if self.vector.shape[-1] <= 0 or not torch.isfinite(self.vector).all():
            raise ValueError("global feature must be a non-empty finite vector")


class Residual(nn.Module):
    def __init__(self, c_in: int, c_out: int, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=dilation, dilation=dilation)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        nn.init.zeros_(self.conv2.bias)
        with torch.no_grad():
            self.conv2.weight.mul_(0.5)

    def forward(self, x):
        return self.skip(x) + self.conv2(F.relu(self.conv1(F.relu(x))))


class Hourglass(nn.Module):
    """Hourglass whose lower levels widen the dilation instead of pooling.

    Keeps the receptive-field growth of the stacked-hourglass design while the
    feature grid stays at one resolution, so the map is exactly translation
    covariant for shifts by a multiple of the encoder stride.
    """

    def __init__(self, channels: int, depth: int, dilation: int = 1):
        super().__init__()
        self.up = Residual(channels, channels, dilation)
        self.low1 = Residual(channels, channels, 2 * dilation)
        self.low2 = Hourglass(channels, depth - 1, 2 * dilation) if depth > 1 else Residual(channels, channels, 2 * dilation)
        self.low3 = Residual(channels, channels, 2 * dilation)

    def forward(self, x):
        return self.up(x) + self.low3(self.low2(self.low1(x)))


class HourglassEncoder(nn.Module):
    """Fully convolutional stacked-hourglass encoder ``g``: (B,3,H,W) -> (B,C,H/s,W/s)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        n_down = int(round(math.log2(cfg.stride)))
        if 2 ** n_down != cfg.stride:
            raise ValueError("stride must be a power of two")
        c = cfg.channels
        layers, c_prev = [], 3
        for i in range(n_down):
            c_next = c if i == n_down - 1 else max(c // 2, 8)
            layers += [nn.Conv2d(c_prev, c_next, 3, stride=2, padding=1), nn.ReLU()]
            c_prev = c_next
        if n_down == 0:
            layers += [nn.Conv2d(3, c, 3, padding=1), nn.ReLU()]
        self.stem = nn.Sequential(*layers, Residual(c, c))
        self.hourglasses = nn.ModuleList(Hourglass(c, cfg.depth) for _ in range(cfg.stacks))
        self.heads = nn.ModuleList(nn.Conv2d(c, c, 1) for _ in range(cfg.stacks))
        self.merges = nn.ModuleList(nn.Conv2d(c, c, 1) for _ in range(cfg.stacks - 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        H, W = images.shape[-2:]
        s = self.cfg.stride
        if H % s or W % s:
            raise ShapeError(f"image size {H}x{W} is not divisible by stride {s}")
        x = self.stem(images)
        out = x
        for i, hg in enumerate(self.hourglasses):
            out = self.heads[i](F.relu(hg(x)))
            if i < len(self.merges):
                x = x + self.merges[i](out)
        return out

    def feature_map(self, images: torch.Tensor) -> FeatureMap:
        return FeatureMap(self(images), self.cfg.stride, tuple(images.shape[-2:]))


def extract_local_features(encoder: HourglassEncoder, image) -> FeatureMap:
    """Eval-mode local features for one (H, W, 3) image in [0, 1] (numpy or tensor)."""
    x = torch.as_tensor(image, dtype=next(encoder.parameters()).dtype)
    if x.dim() == 3:
        x = x.permute(2, 0, 1).unsqueeze(0)
    encoder.eval()
    with torch.no_grad():
        return encoder.feature_map(x)


def pixel_to_grid(pixels: torch.Tensor, width: float, height: float) -> torch.Tensor:
    """Continuous pixel coords -> grid_sample coords (align_corners=False convention)."""
    gx = 2.0 * pixels[..., 0] / width - 1.0
    gy = 2.0 * pixels[..., 1] / height - 1.0
    return torch.stack([gx, gy], dim=-1)


def sample_points(feat: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup with border clamping; feat (B,C,H,W), grid (B,N,2) -> (B,N,C)."""
    out = F.grid_sample(feat, grid.unsqueeze(1), mode="bilinear", padding_mode="border", align_corners=False)
    return out[:, :, 0, :].transpose(1, 2)


def sample_feature(fmap: FeatureMap, pixel) -> torch.Tensor:
    """Feature vector(s) at continuous pixel position(s) of image 0; pixels outside clamp to the border."""
    H, W = fmap.image_size
    p = torch.as_tensor(pixel, dtype=fmap.tensor.dtype).reshape(1, -1, 2)
    out = sample_points(fmap.tensor[:1], pixel_to_grid(p, W, H))[0]
    return out[0] if torch.as_tensor(pixel).dim() == 1 else out


class CropEncoder(nn.Module):
    """Global encoder over a square image crop: strided convs, average pool, MLP."""

    def __init__(self, out_dim: int = 256, width: int = 32):
        super().__init__()
        chans = [3, width // 2, width, 2 * width, 4 * width]
        convs = []
        for a, b in zip(chans[:-1], chans[1:]):
            convs += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.ReLU()]
        self.convs = nn.Sequential(*convs)
        self.fc = nn.Sequential(nn.Linear(chans[-1], out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim))

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        if crops.numel() == 0:
            raise ValueError("empty crop")
        return self.fc(self.convs(crops).mean(dim=(2, 3)))


class PooledEncoder(nn.Module):
    """Global encoder over a feature map (``G(F)`` or ``G'(F^r)``): conv, average pool, MLP."""

    def __init__(self, in_channels: int, out_dim: int = 256):
        super().__init__()
        self.conv = nn.Sequential(nn.Conv2d(in_channels, in_channels, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(in_channels, in_channels, 3, padding=1), nn.ReLU())
        self.fc = nn.Sequential(nn.Linear(in_channels, out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim))

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.numel() == 0:
            raise ValueError("empty feature map")
        return self.fc(self.conv(fmap).mean(dim=(2, 3)))


def encode_global(encoder: nn.Module, x) -> GlobalFeature:
    """Eval-mode global vector from a crop batch (CropEncoder) or a FeatureMap (PooledEncoder)."""
    encoder.eval()
    with torch.no_grad():
        if isinstance(x, FeatureMap):
            return GlobalFeature(encoder(x.tensor), "whole-image")
        return GlobalFeature(encoder(x), "instance-crop")
