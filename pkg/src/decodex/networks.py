"""Network architectures: a small conv classifier and a compact U-Net denoiser.

Both operate on single-channel images in [0,1]. Sized for CPU training on
32x32 inputs.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class SmallConvNet(nn.Module):
    """Three conv blocks + global average pooling + linear head -> one logit."""

    def __init__(self, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(1, c, 3, padding=1),
            _gn(c),
            nn.SiLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c, 2 * c, 3, padding=1),
            _gn(2 * c),
            nn.SiLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * c, 4 * c, 3, padding=1),
            _gn(4 * c),
            nn.SiLU(),
            nn.MaxPool2d(2),
        )
        self.head = nn.Linear(4 * c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = h.mean(dim=(2, 3))
        return self.head(h).squeeze(-1)


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / (half - 1))
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _TimeConvBlock(nn.Module):
    """conv-norm-act twice, with an additive time-embedding shift in between."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _gn(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _gn(out_ch)
        self.temb_proj = nn.Linear(temb_dim, out_ch)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class UNetDenoiser(nn.Module):
    """Two-level U-Net with timestep embedding; predicts the injected noise."""

    def __init__(self, base_channels: int = 24, temb_dim: int = 64):
        super().__init__()
        c = base_channels
        self.time_embed = SinusoidalTimeEmbedding(temb_dim)
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))

        self.enc1 = _TimeConvBlock(1, c, temb_dim)
        self.enc2 = _TimeConvBlock(c, 2 * c, temb_dim)
        self.mid = _TimeConvBlock(2 * c, 4 * c, temb_dim)
        self.up2 = nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2)
        self.dec2 = _TimeConvBlock(4 * c, 2 * c, temb_dim)
        self.up1 = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.dec1 = _TimeConvBlock(2 * c, c, temb_dim)
        self.out = nn.Conv2d(c, 1, 1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(self.time_embed(t))
        h1 = self.enc1(x, temb)
        h2 = self.enc2(self.pool(h1), temb)
        m = self.mid(self.pool(h2), temb)
        d2 = self.dec2(torch.cat([self.up2(m), h2], dim=1), temb)
        d1 = self.dec1(torch.cat([self.up1(d2), h1], dim=1), temb)
        return self.out(d1)


ARCHITECTURES = {
    "small_convnet": SmallConvNet,
    "unet_denoiser": UNetDenoiser,
}


def build_network(descriptor: dict) -> nn.Module:
    kind = descriptor.get("type")
    if kind == "small_convnet":
        return SmallConvNet(base_channels=descriptor.get("base_channels", 16))
    if kind == "unet_denoiser":
        return UNetDenoiser(
            base_channels=descriptor.get("base_channels", 24),
            temb_dim=descriptor.get("temb_dim", 64),
        )
    raise ValueError(f"unknown architecture {kind!r}")
