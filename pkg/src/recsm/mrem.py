"""Multi-scale residual estimation.

Each scale searches integer offsets ``-R..R`` around a prior disparity, so the
cost volume holds ``2R+1`` slices instead of one slice per absolute disparity.
Scales run small -> medium -> large, each one starting from the previous
scale's result. The large scale also multiplies its volume by an attention map
computed from the edges of the previous frame's disparity.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import (
    PYRAMID_STRIDES,
    ConfigError,
    DisparityMap,
    FeaturePyramid,
    NumericError,
    ResidualMap,
    ShapeError,
    rescale_disparity,
)

SCALES = ("small", "medium", "large")
# smooth |g| that is exactly 0 at g = 0: sqrt(g^2 + eps^2) - eps with eps a power of two
_EDGE_EPS = 2.0 ** -10


@dataclass(frozen=True)
class ResidualCostVolume:
    costs: torch.Tensor  # [B, C_v, 2R+1, H, W]
    range_r: int
    scale_stride: int

    def __post_init__(self):
        if self.costs.dim() != 5 or self.costs.shape[2] != 2 * self.range_r + 1:
            raise ShapeError(f"cost volume {tuple(self.costs.shape)} does not match R = {self.range_r}")

    @property
    def offsets(self) -> torch.Tensor:
        return torch.arange(-self.range_r, self.range_r + 1)


@dataclass(frozen=True)
class TemporalAttention:
    weights: torch.Tensor  # [B, 1, H, W], strictly inside (0, 1)


def sample_rows(features: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Linearly interpolate ``features [B,C,H,W]`` along W at ``positions [B,D,H,W]``.

    Returns ``[B, C, D, H, W]``; samples outside ``[0, W-1]`` read zeros.
    """
    b, c, h, w = features.shape
    d = positions.shape[1]
    x0 = torch.floor(positions)
    frac = positions - x0
    x0 = x0.clamp(-2, w + 1).long()
    x1 = x0 + 1
    padded = F.pad(features, (1, 1))  # column 0 and W+1 are the zero border
    src = padded.unsqueeze(2).expand(b, c, d, h, w + 2)

    def gather(idx):
        # anything left of column 0 or right of W-1 lands on a zero border column
        idx = (idx + 1).clamp(0, w + 1)
        idx = idx.unsqueeze(1).expand(b, c, d, h, w)
        return torch.gather(src, 4, idx)

    v0 = gather(x0)
    v1 = gather(x1)
    frac = frac.unsqueeze(1)
    return v0 * (1 - frac) + v1 * frac


def _disparity_tensor(disparity) -> torch.Tensor:
    if isinstance(disparity, DisparityMap):
        return disparity.batched()
    return disparity.unsqueeze(0) if disparity.dim() == 2 else disparity


def warp_features(right_features: torch.Tensor, disparity, feature_stride: int | None = None) -> torch.Tensor:
    """Sample ``right_features`` at ``x - d(x)`` for every left pixel ``x``."""
    if isinstance(disparity, DisparityMap) and feature_stride is not None and disparity.scale_stride != feature_stride:
        raise ShapeError(f"disparity stride {disparity.scale_stride} != feature stride {feature_stride}")
    unbatched = right_features.dim() == 3
    feats = right_features.unsqueeze(0) if unbatched else right_features
    d = _disparity_tensor(disparity)
    if d.shape[-2:] != feats.shape[-2:]:
        raise ShapeError(f"disparity {tuple(d.shape)} does not match features {tuple(feats.shape)}")
    cols = torch.arange(feats.shape[-1], dtype=feats.dtype, device=feats.device)
    warped = sample_rows(feats, (cols - d).unsqueeze(1))[:, :, 0]
    return warped[0] if unbatched else warped


def build_residual_cost_volume(
    left_features: torch.Tensor,
    right_features: torch.Tensor,
    prior_disparity,
    range_r: int,
    scale_stride: int = 1,
) -> ResidualCostVolume:
    """Concatenation volume: slice ``r`` pairs left features with right features warped by ``prior + r``."""
    if range_r < 1:
        raise ConfigError(f"search range R must be >= 1, got {range_r}")
    if isinstance(prior_disparity, DisparityMap):
        scale_stride = prior_disparity.scale_stride
    if left_features.shape != right_features.shape:
        raise ShapeError("left and right features differ in shape")
    prior = _disparity_tensor(prior_disparity)
    if prior.shape[-2:] != left_features.shape[-2:]:
        raise ShapeError(f"prior {tuple(prior.shape)} does not match features {tuple(left_features.shape)}")
    offsets = torch.arange(-range_r, range_r + 1, dtype=left_features.dtype, device=left_features.device)
    cols = torch.arange(left_features.shape[-1], dtype=left_features.dtype, device=left_features.device)
    positions = cols - prior.unsqueeze(1) - offsets.view(1, -1, 1, 1)
    warped = sample_rows(right_features, positions)
    left = left_features.unsqueeze(2).expand_as(warped)
    return ResidualCostVolume(torch.cat([left, warped], dim=1), range_r, scale_stride)


class CostAggregation(nn.Module):
    """Four 3x3x3 convolutions, channels C_v -> C_v/2 -> C_v/2 -> C_v/4 -> 1."""

    def __init__(self, volume_channels: int):
        super().__init__()
        half = max(volume_channels // 2, 1)
        quarter = max(volume_channels // 4, 1)
        self.convs = nn.ModuleList([
            nn.Conv3d(volume_channels, half, 3, 1, 1),
            nn.Conv3d(half, half, 3, 1, 1),
            nn.Conv3d(half, quarter, 3, 1, 1),
            nn.Conv3d(quarter, 1, 3, 1, 1),
        ])

    def forward(self, costs: torch.Tensor) -> torch.Tensor:
        x = costs
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, 0.1)
        return x.squeeze(1)


def aggregate_costs(volume: ResidualCostVolume, aggregation: CostAggregation) -> torch.Tensor:
    return aggregation(volume.costs)


def soft_argmin_residual(scores: torch.Tensor) -> ResidualMap:
    """Expected offset under ``softmax(-scores)`` over the offset axis (dim -3).

    Written as ``sum_{r>0} r * (p_r - p_-r)`` so symmetric distributions give
    exactly zero; the result is clamped to absorb rounding beyond ``[-R, R]``.
    """
    if torch.isnan(scores).any():
        raise NumericError("NaN in matching scores")
    n = scores.shape[-3]
    if n % 2 == 0:
        raise ShapeError(f"offset axis must have odd length 2R+1, got {n}")
    r = n // 2
    prob = torch.softmax(-scores, dim=-3)
    pos = prob.narrow(-3, r + 1, r)
    neg = prob.narrow(-3, 0, r).flip(-3)
    weights = torch.arange(1, r + 1, dtype=scores.dtype, device=scores.device).view(-1, 1, 1)
    eps = ((pos - neg) * weights).sum(dim=-3).clamp(-r, r)
    return ResidualMap(eps, r)


class TemporalAttentionHead(nn.Module):
    """Sobel edge magnitude of a disparity map -> one 3x3 conv -> sigmoid."""

    def __init__(self):
        super().__init__()
        sobel_x = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
        self.register_buffer("sobel", torch.stack([sobel_x, sobel_x.t()]).unsqueeze(1), persistent=False)
        self.conv = nn.Conv2d(1, 1, 3, 1, 1)
        nn.init.normal_(self.conv.weight, 0.0, 0.01)
        nn.init.constant_(self.conv.bias, 2.0)

    def edges(self, disparity: torch.Tensor) -> torch.Tensor:
        x = F.pad(disparity.unsqueeze(1), (1, 1, 1, 1), mode="replicate")
        g = F.conv2d(x, self.sobel.to(x.dtype))
        eps = _EDGE_EPS
        return torch.sqrt((g * g).sum(dim=1, keepdim=True) + eps * eps) - eps

    def forward(self, disparity: torch.Tensor) -> TemporalAttention:
        return TemporalAttention(torch.sigmoid(self.conv(self.edges(disparity))))


def compute_temporal_attention(prev_disparity, head: TemporalAttentionHead) -> TemporalAttention:
    if isinstance(prev_disparity, DisparityMap):
        if prev_disparity.scale_stride != PYRAMID_STRIDES["large"]:
            raise ShapeError("attention source must be at the large-scale stride")
    return head(_disparity_tensor(prev_disparity))


def apply_temporal_attention(volume: ResidualCostVolume, attention: TemporalAttention) -> ResidualCostVolume:
    w = attention.weights
    if w.shape[-2:] != volume.costs.shape[-2:] or w.shape[0] != volume.costs.shape[0]:
        raise ShapeError(f"attention {tuple(w.shape)} does not match volume {tuple(volume.costs.shape)}")
    return ResidualCostVolume(volume.costs * w.unsqueeze(2), volume.range_r, volume.scale_stride)


@dataclass
class MremOutput:
    disparity: torch.Tensor  # [B, H, W] at stride 1
    branches: dict[str, torch.Tensor]  # each branch result at stride 1
    residuals: dict[str, ResidualMap]  # each at its own scale
    scale_disparities: dict[str, torch.Tensor]  # each branch result at its own scale


class MREM(nn.Module):
    def __init__(self, pyramid_channels: tuple[int, int, int], use_temporal_attention: bool = True):
        super().__init__()
        self.aggregation = nn.ModuleDict({
            scale: CostAggregation(2 * ch) for scale, ch in zip(SCALES, pyramid_channels)
        })
        self.attention = TemporalAttentionHead() if use_temporal_attention else None

    def forward(
        self,
        left: FeaturePyramid,
        right: FeaturePyramid,
        prior: torch.Tensor,
        attention_source: torch.Tensor,
        ranges: tuple[int, int, int],
    ) -> MremOutput:
        """``prior`` and ``attention_source`` are ``[B, H, W]`` at stride 1; ``ranges`` is (R_l, R_m, R_s)."""
        if min(ranges) < 1:
            raise ConfigError(f"ranges must be positive, got {ranges}")
        r_by_scale = {"large": ranges[0], "medium": ranges[1], "small": ranges[2]}
        branches, residuals, at_scale = {}, {}, {}
        current, current_stride = prior, 1
        for scale in SCALES:
            stride = PYRAMID_STRIDES[scale]
            base = rescale_disparity(current, current_stride, stride)
            volume = build_residual_cost_volume(left.at(scale), right.at(scale), base, r_by_scale[scale], stride)
            if scale == "large" and self.attention is not None:
                source = rescale_disparity(attention_source, 1, stride)
                volume = apply_temporal_attention(volume, self.attention(source))
            eps = soft_argmin_residual(aggregate_costs(volume, self.aggregation[scale]))
            current, current_stride = base + eps.values, stride
            residuals[scale] = eps
            at_scale[scale] = current
            branches[scale] = rescale_disparity(current, stride, 1)
        return MremOutput(branches["large"], branches, residuals, at_scale)


def mrem_forward(
    pyramids_left: FeaturePyramid,
    pyramids_right: FeaturePyramid,
    prior_disparity: DisparityMap,
    prev_disparity_for_attention: DisparityMap,
    ranges: tuple[int, int, int],
    module: MREM,
) -> tuple[DisparityMap, dict[str, DisparityMap]]:
    for d in (prior_disparity, prev_disparity_for_attention):
        if d.scale_stride != 1:
            raise ShapeError("mrem_forward expects stride-1 disparities")
    out = module(pyramids_left, pyramids_right, prior_disparity.batched(),
                 prev_disparity_for_attention.batched(), ranges)
    squeeze = prior_disparity.values.dim() == 2

    def wrap(t):
        return DisparityMap(t[0] if squeeze else t, 1)

    return wrap(out.disparity), {k: wrap(v) for k, v in out.branches.items()}
