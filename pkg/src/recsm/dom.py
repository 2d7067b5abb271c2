"""Disparity optimisation head: dilated residual convolutions guided by the left image."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import DisparityMap, ShapeError

DILATIONS = (1, 2, 4, 8, 1, 1)
# disparities enter the network divided by this, corrections leave multiplied by it
DISPARITY_SCALE = 32.0


class DilatedBlock(nn.Module):
    def __init__(self, channels, dilation):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, dilation, dilation=dilation)

    def forward(self, x):
        return x + F.leaky_relu(self.conv(x), 0.1)


class DOM(nn.Module):
    def __init__(self, channels: int = 32, image_channels: int = 16):
        super().__init__()
        self.image_convs = nn.Sequential(
            nn.Conv2d(3, image_channels, 3, 1, 1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(image_channels, image_channels, 3, 1, 1),
            nn.LeakyReLU(0.1),
        )
        self.fuse = nn.Conv2d(image_channels + 1, channels, 3, 1, 1)
        self.blocks = nn.Sequential(*[DilatedBlock(channels, d) for d in DILATIONS])
        self.head = nn.Conv2d(channels, 1, 3, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def correction(self, disparity: torch.Tensor, left_image: torch.Tensor) -> torch.Tensor:
        if disparity.shape[-2:] != left_image.shape[-2:] or disparity.shape[0] != left_image.shape[0]:
            raise ShapeError(f"disparity {tuple(disparity.shape)} vs image {tuple(left_image.shape)}")
        feats = self.image_convs((left_image - 0.5) / 0.5)
        x = torch.cat([disparity.unsqueeze(1) / DISPARITY_SCALE, feats], dim=1)
        x = self.blocks(F.leaky_relu(self.fuse(x), 0.1))
        return self.head(x).squeeze(1) * DISPARITY_SCALE

    def forward(self, disparity: torch.Tensor, left_image: torch.Tensor) -> torch.Tensor:
        """``disparity [B, H, W]`` at stride 1, ``left_image [B, 3, H, W]``; output clamped at 0."""
        return torch.clamp(disparity + self.correction(disparity, left_image), min=0.0)


def dom_forward(disparity_in: DisparityMap, left_image: torch.Tensor, dom: DOM) -> DisparityMap:
    if disparity_in.scale_stride != 1:
        raise ShapeError("DOM runs at full resolution")
    squeeze = disparity_in.values.dim() == 2
    image = left_image.unsqueeze(0) if left_image.dim() == 3 else left_image
    out = dom(disparity_in.batched(), image)
    return DisparityMap(out[0] if squeeze else out, 1)
