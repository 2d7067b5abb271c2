"""Core value types shared by every stage of the network.

Disparities are stored in the pixel units of the grid they live on. A map at
stride 8 holding the value 5 means a horizontal offset of 5 stride-8 pixels,
i.e. 40 full-resolution pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

COARSEST_STRIDE = 16
PYRAMID_STRIDES = {"small": 16, "medium": 8, "large": 4}
MAX_VALID_DISPARITY = 192.0


class RecSMError(Exception):
    """Base class; ``category`` is the machine-readable tag printed by the CLI."""

    category = "error"


class ShapeError(RecSMError, ValueError):
    category = "shape"


class ConfigError(RecSMError, ValueError):
    category = "config"


class FormatError(RecSMError, ValueError):
    category = "format"


class NumericError(RecSMError, ArithmeticError):
    category = "numeric"


class UndefinedMetricError(RecSMError, ValueError):
    category = "metric"


@dataclass(frozen=True)
class StereoFrame:
    """A rectified pair, ``[3, H, W]`` or batched ``[B, 3, H, W]``, intensities in [0, 1]."""

    left: torch.Tensor
    right: torch.Tensor
    frame_index: int = 0

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ShapeError(f"left {tuple(self.left.shape)} != right {tuple(self.right.shape)}")
        if self.left.dim() not in (3, 4) or self.left.shape[-3] != 3:
            raise ShapeError(f"expected [3,H,W] or [B,3,H,W], got {tuple(self.left.shape)}")
        check_divisible(self.left.shape[-2], self.left.shape[-1])
        if self.frame_index < 0:
            raise ConfigError("frame_index must be non-negative")

    @property
    def size(self) -> tuple[int, int]:
        return self.left.shape[-2], self.left.shape[-1]

    def batched(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self.left.dim() == 3:
            return self.left.unsqueeze(0), self.right.unsqueeze(0)
        return self.left, self.right


@dataclass(frozen=True)
class DisparityMap:
    """Disparity ``[H, W]`` (or ``[B, H, W]``) at ``scale_stride``; ``valid`` is an optional bool mask."""

    values: torch.Tensor
    scale_stride: int = 1
    valid: torch.Tensor | None = None

    def __post_init__(self):
        if self.values.dim() not in (2, 3):
            raise ShapeError(f"disparity must be [H,W] or [B,H,W], got {tuple(self.values.shape)}")
        if self.scale_stride < 1:
            raise ConfigError("scale_stride must be a positive integer")
        if self.valid is not None and self.valid.shape != self.values.shape:
            raise ShapeError("valid mask shape must match disparity values")

    @property
    def size(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]

    def batched(self) -> torch.Tensor:
        return self.values.unsqueeze(0) if self.values.dim() == 2 else self.values

    def to_stride(self, new_stride: int) -> "DisparityMap":
        return convert_disparity_stride(self, new_stride)


@dataclass(frozen=True)
class ResidualMap:
    values: torch.Tensor
    range_r: int

    def __post_init__(self):
        if self.range_r < 1:
            raise ConfigError("range_r must be >= 1")
        check_residual_bound(self.values, self.range_r)


@dataclass(frozen=True)
class FeaturePyramid:
    """Batched features ``[B, C, H/s, W/s]`` at strides 16 / 8 / 4."""

    small: torch.Tensor
    medium: torch.Tensor
    large: torch.Tensor

    def at(self, scale: str) -> torch.Tensor:
        return getattr(self, scale)


@dataclass(frozen=True)
class RSchedule:
    """Residual search half-widths, one ``(R_large, R_medium, R_small)`` triple per SCS."""

    per_scs: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        entries = tuple(tuple(int(r) for r in e) for e in self.per_scs)
        object.__setattr__(self, "per_scs", entries)
        if not entries:
            raise ConfigError("R schedule needs at least one entry")
        for entry in entries:
            if len(entry) != 3 or min(entry) < 1:
                raise ConfigError(f"R entry {entry} must be three positive integers")
            if not entry[0] >= entry[1] >= entry[2]:
                raise ConfigError(f"R entry {entry} must satisfy R_large >= R_medium >= R_small")
        for prev, nxt in zip(entries, entries[1:]):
            if any(b > a for a, b in zip(prev, nxt)):
                raise ConfigError("R schedule must be non-increasing across SCS index")

    def __len__(self):
        return len(self.per_scs)

    def __getitem__(self, i):
        return self.per_scs[i]


@dataclass(frozen=True)
class ScsConfig:
    k: int
    r_schedule: RSchedule
    use_temporal_attention: bool = True
    use_dom: bool = True
    shared_dom: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if len(self.r_schedule) != self.k:
            raise ConfigError(f"R schedule has {len(self.r_schedule)} entries, K = {self.k}")


@dataclass(frozen=True)
class LossWeights:
    """Per-branch weights (small, medium, large), per-SCS weights, and the refined-output weight.

    ``dom_weight`` adds a smooth-L1 term on each SCS's refined output. At 0
    only the three branches are supervised, and with K = 1 the refinement
    head then receives no gradient at all.
    """

    branch_weights: tuple[float, float, float] = (0.5, 0.7, 0.9)
    scs_weights: tuple[float, ...] | None = None
    dom_weight: float = 0.0

    def __post_init__(self):
        if len(self.branch_weights) != 3:
            raise ConfigError("branch_weights needs exactly three entries")
        if self.scs_weights is not None and any(w <= 0 for w in self.scs_weights):
            raise ConfigError("SCS weights must be positive")
        if self.dom_weight < 0:
            raise ConfigError("dom_weight must be non-negative")

    def lambdas(self, k: int) -> tuple[float, ...]:
        if self.scs_weights is None:
            return (1.0,) * k
        if len(self.scs_weights) != k:
            raise ConfigError(f"{len(self.scs_weights)} SCS weights for K = {k}")
        return tuple(self.scs_weights)


@dataclass
class StereoSequence:
    """Ordered frames with optional ground truth.

    ``disparities[n]`` carries the occlusion-aware validity mask; ``dense[n]``
    (synthetic data only) is the same map without holes, used as a prior.
    """

    frames: list[StereoFrame]
    disparities: list[DisparityMap | None] = field(default_factory=list)
    dense: list[DisparityMap | None] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)


def check_divisible(height: int, width: int, stride: int = COARSEST_STRIDE) -> None:
    if height % stride or width % stride:
        raise ShapeError(f"image size {height}x{width} is not divisible by {stride}")


def check_residual_bound(values: torch.Tensor, range_r: int) -> None:
    if torch.isnan(values).any():
        raise NumericError("residual contains NaN")
    if values.numel() and values.detach().abs().max().item() > range_r:
        raise NumericError(f"residual exceeds search range R = {range_r}")


def _lerp_upsample(x: torch.Tensor, factor: int, dim: int) -> torch.Tensor:
    """Pixel-centre aligned linear upsampling along ``dim``, clamped at the edges.

    Written as ``a + t * (b - a)`` so that equal neighbours reproduce themselves bit for bit.
    """
    n = x.shape[dim]
    src = ((torch.arange(n * factor, dtype=x.dtype, device=x.device) + 0.5) / factor - 0.5).clamp(0, n - 1)
    i0 = src.floor().long()
    i1 = (i0 + 1).clamp(max=n - 1)
    shape = [1] * x.dim()
    shape[dim] = n * factor
    t = (src - i0.to(x.dtype)).view(shape)
    a, b = x.index_select(dim, i0), x.index_select(dim, i1)
    return a + t * (b - a)


def _pair_mean(x: torch.Tensor, dim: int) -> torch.Tensor:
    pairs = x.unfold(dim, 2, 2)
    return pairs[..., 0] + 0.5 * (pairs[..., 1] - pairs[..., 0])


def rescale_disparity(values: torch.Tensor, stride: int, new_stride: int) -> torch.Tensor:
    """Resample a batched ``[B, H, W]`` disparity tensor between strides.

    Upsampling is bilinear (pixel-centre aligned, edge-clamped), downsampling is
    an area average, and values are multiplied by ``stride / new_stride``.
    Constant maps stay exactly constant in both directions.
    """
    if stride == new_stride:
        return values
    h, w = values.shape[-2:]
    if stride > new_stride:
        if stride % new_stride:
            raise ShapeError(f"stride {stride} is not a multiple of {new_stride}")
        factor = stride // new_stride
        x = _lerp_upsample(_lerp_upsample(values, factor, -2), factor, -1)
        return x * factor
    if new_stride % stride:
        raise ShapeError(f"stride {new_stride} is not a multiple of {stride}")
    factor = new_stride // stride
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} map cannot be reduced by {factor}")
    x, f = values, factor
    while f % 2 == 0:
        x = _pair_mean(_pair_mean(x, -2), -1)
        f //= 2
    if f > 1:
        x = F.avg_pool2d(x.unsqueeze(1), f).squeeze(1)
    return x / factor


def convert_disparity_stride(d: DisparityMap, new_stride: int) -> DisparityMap:
    if new_stride < 1:
        raise ConfigError("new_stride must be a positive integer")
    if new_stride == d.scale_stride:
        return d
    values = rescale_disparity(d.batched(), d.scale_stride, new_stride)
    if d.values.dim() == 2:
        values = values.squeeze(0)
    return DisparityMap(values, new_stride)
