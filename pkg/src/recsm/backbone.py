"""Shared residual encoder with an additive top-down feature pyramid (strides 16 / 8 / 4)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ConfigError, FeaturePyramid, ShapeError, check_divisible

INPUT_MEAN = 0.5
INPUT_STD = 0.5

PRESETS = {
    # stage widths are multiples of base_channels for "tiny"
    "tiny": {"blocks": (2, 2, 2, 2)},
    "paper-width": {"blocks": (3, 4, 6, 3), "stages": (256, 512, 1024, 2048), "pyramid": (256, 256, 256)},
}


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 16
    pyramid_channels: tuple[int, int, int] = (32, 32, 32)  # (small, medium, large)
    depth_preset: str = "tiny"

    def __post_init__(self):
        if self.depth_preset not in PRESETS:
            raise ConfigError(f"unknown depth preset {self.depth_preset!r}")
        if self.base_channels < 1 or len(self.pyramid_channels) != 3 or min(self.pyramid_channels) < 1:
            raise ConfigError("backbone channel counts must be positive")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        preset = PRESETS[self.depth_preset]
        if "stages" in preset:
            return preset["stages"]
        b = self.base_channels
        return (b, 2 * b, 4 * b, 8 * b)

    @property
    def blocks_per_stage(self) -> tuple[int, ...]:
        return PRESETS[self.depth_preset]["blocks"]

    @property
    def pyramid(self) -> tuple[int, int, int]:
        return tuple(PRESETS[self.depth_preset].get("pyramid", self.pyramid_channels))


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride)

    def forward(self, x):
        y = F.leaky_relu(self.conv1(x), 0.1)
        y = self.conv2(y)
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.leaky_relu(y + skip, 0.1)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BackboneConfig()
        stages = cfg.stage_channels
        self.stem = nn.Conv2d(3, stages[0] if cfg.depth_preset == "tiny" else 64, 3, 1, 1)
        in_ch = self.stem.out_channels
        self.stages = nn.ModuleList()
        for out_ch, n_blocks in zip(stages, cfg.blocks_per_stage):
            blocks = [ResidualBlock(in_ch, out_ch, stride=2)]
            blocks += [ResidualBlock(out_ch, out_ch) for _ in range(n_blocks - 1)]
            self.stages.append(nn.Sequential(*blocks))
            in_ch = out_ch

        c_s, c_m, c_l = cfg.pyramid
        self.lateral_small = nn.Conv2d(stages[3], c_s, 1)
        self.lateral_medium = nn.Conv2d(stages[2], c_m, 1)
        self.lateral_large = nn.Conv2d(stages[1], c_l, 1)
        self.topdown_medium = nn.Conv2d(c_s, c_m, 1) if c_s != c_m else nn.Identity()
        self.topdown_large = nn.Conv2d(c_m, c_l, 1) if c_m != c_l else nn.Identity()
        self.smooth_small = nn.Conv2d(c_s, c_s, 3, 1, 1)
        self.smooth_medium = nn.Conv2d(c_m, c_m, 3, 1, 1)
        self.smooth_large = nn.Conv2d(c_l, c_l, 3, 1, 1)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        """``image`` is ``[B, 3, H, W]`` in [0, 1] with H, W divisible by 16."""
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W], got {tuple(image.shape)}")
        check_divisible(*image.shape[-2:])
        x = F.leaky_relu(self.stem((image - INPUT_MEAN) / INPUT_STD), 0.1)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        _, c4, c8, c16 = feats

        p16 = self.lateral_small(c16)
        p8 = self.lateral_medium(c8) + F.interpolate(self.topdown_medium(p16), scale_factor=2, mode="nearest")
        p4 = self.lateral_large(c4) + F.interpolate(self.topdown_large(p8), scale_factor=2, mode="nearest")
        return FeaturePyramid(
            small=self.smooth_small(p16),
            medium=self.smooth_medium(p8),
            large=self.smooth_large(p4),
        )


def extract_pyramid(frame_image: torch.Tensor, backbone: Backbone) -> FeaturePyramid:
    """Unbatched convenience wrapper: ``[3, H, W]`` in, pyramid with a batch dim of 1 out."""
    if frame_image.dim() == 3:
        frame_image = frame_image.unsqueeze(0)
    return backbone(frame_image)
