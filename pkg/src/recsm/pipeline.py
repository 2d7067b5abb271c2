"""K stacked refinement units and the frame-to-frame recursion."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig
from .datamodel import (
    ConfigError,
    DisparityMap,
    FeaturePyramid,
    NumericError,
    RSchedule,
    ScsConfig,
    ShapeError,
    StereoFrame,
    StereoSequence,
)
from .dom import DOM
from .mrem import MREM, MremOutput, SCALES

FIRST_RANGES = (16, 8, 4)  # (R_large, R_medium, R_small) of the first unit


def default_r_schedule(k: int) -> RSchedule:
    """First unit searches (16, 8, 4); every later unit halves each range, never below 1."""
    if k < 1:
        raise ConfigError("K must be >= 1")
    entries = [FIRST_RANGES]
    for _ in range(k - 1):
        entries.append(tuple(max(r // 2, 1) for r in entries[-1]))
    return RSchedule(tuple(entries))


def fixed_r_schedule(k: int, ranges: tuple[int, int, int] = FIRST_RANGES) -> RSchedule:
    if k < 1:
        raise ConfigError("K must be >= 1")
    return RSchedule((tuple(ranges),) * k)


@dataclass(frozen=True)
class ModelConfig:
    k: int = 3
    r_schedule: tuple[tuple[int, int, int], ...] | None = None  # None -> default_r_schedule(k)
    use_temporal_attention: bool = True
    use_dom: bool = True
    shared_dom: bool = True
    dom_channels: int = 32
    dom_image_channels: int = 16
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    @property
    def scs(self) -> ScsConfig:
        schedule = default_r_schedule(self.k) if self.r_schedule is None else RSchedule(self.r_schedule)
        return ScsConfig(self.k, schedule, self.use_temporal_attention, self.use_dom, self.shared_dom)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r_schedule"] = [list(e) for e in self.scs.r_schedule.per_scs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone", {}) or {}
        if "pyramid_channels" in bb:
            bb["pyramid_channels"] = tuple(bb["pyramid_channels"])
        if d.get("r_schedule") is not None:
            d["r_schedule"] = tuple(tuple(e) for e in d["r_schedule"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(backbone=BackboneConfig(**bb), **d)


@dataclass
class FrameOutput:
    """Batched tensors produced by one forward pass of :class:`RecSM`."""

    final: torch.Tensor
    per_scs: list[torch.Tensor]
    per_scs_mrem: list[MremOutput]


@dataclass
class FrameResult:
    final_disparity: DisparityMap
    per_scs_disparities: list[DisparityMap]
    per_scs_branch_disparities: list[tuple[DisparityMap, DisparityMap, DisparityMap]]
    residual_sum: torch.Tensor
    per_scs_mrem_disparities: list[DisparityMap]


class RecSM(nn.Module):
    """Model state: one backbone, one MREM per unit, and one DOM (shared) or K DOMs."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.scs_config = cfg.scs
        self.backbone = Backbone(cfg.backbone)
        pyramid = cfg.backbone.pyramid
        self.mrems = nn.ModuleList([MREM(pyramid, cfg.use_temporal_attention) for _ in range(cfg.k)])
        self.dom = None
        self.doms = None
        if cfg.use_dom:
            if cfg.shared_dom:
                self.dom = DOM(cfg.dom_channels, cfg.dom_image_channels)
            else:
                self.doms = nn.ModuleList([DOM(cfg.dom_channels, cfg.dom_image_channels) for _ in range(cfg.k)])

    @property
    def k(self) -> int:
        return self.cfg.k

    def dom_for(self, i: int) -> DOM | None:
        if self.dom is not None:
            return self.dom
        if self.doms is not None:
            return self.doms[i]
        return None

    def features(self, left: torch.Tensor, right: torch.Tensor) -> tuple[FeaturePyramid, FeaturePyramid]:
        return self.backbone(left), self.backbone(right)

    def scs(self, i: int, feats_left, feats_right, left: torch.Tensor, context: torch.Tensor,
            prev_frame: torch.Tensor) -> tuple[torch.Tensor, MremOutput]:
        """Unit ``i``: residual search around ``context``, then refinement (or a clamp at 0)."""
        out = self.mrems[i](feats_left, feats_right, context, prev_frame, self.scs_config.r_schedule[i])
        dom = self.dom_for(i)
        refined = dom(out.disparity, left) if dom is not None else out.disparity.clamp(min=0.0)
        return refined, out

    def forward(self, left: torch.Tensor, right: torch.Tensor, prev: torch.Tensor) -> FrameOutput:
        """``left``/``right`` are ``[B, 3, H, W]``; ``prev`` is the previous frame's ``[B, H, W]`` disparity."""
        if prev.shape[-2:] != left.shape[-2:]:
            raise ShapeError(f"prior {tuple(prev.shape)} does not match images {tuple(left.shape)}")
        fl, fr = self.features(left, right)
        context = prev
        per_scs, mrem_outs = [], []
        for i in range(self.k):
            context, out = self.scs(i, fl, fr, left, context, prev)
            per_scs.append(context)
            mrem_outs.append(out)
        return FrameOutput(per_scs[-1], per_scs, mrem_outs)


def mrem_parameter_count(model: RecSM) -> int:
    return sum(p.numel() for p in model.mrems[0].parameters())


def verify_weight_sharing(model: RecSM) -> bool:
    """True iff every unit resolves to one identical set of DOM parameter tensors."""
    if not model.cfg.use_dom:
        return False
    reference = list(model.dom_for(0).parameters())
    for i in range(1, model.k):
        params = list(model.dom_for(i).parameters())
        if len(params) != len(reference) or any(p is not q for p, q in zip(params, reference)):
            return False
    return True


def _wrap(t: torch.Tensor, squeeze: bool) -> DisparityMap:
    return DisparityMap(t[0] if squeeze else t, 1)


def _to_result(out: FrameOutput, prev: torch.Tensor, squeeze: bool) -> FrameResult:
    branches = [tuple(_wrap(m.branches[s], squeeze) for s in SCALES) for m in out.per_scs_mrem]
    residual = out.final - prev
    return FrameResult(
        final_disparity=_wrap(out.final, squeeze),
        per_scs_disparities=[_wrap(d, squeeze) for d in out.per_scs],
        per_scs_branch_disparities=branches,
        residual_sum=residual[0] if squeeze else residual,
        per_scs_mrem_disparities=[_wrap(m.disparity, squeeze) for m in out.per_scs_mrem],
    )


def _check_prior(frame: StereoFrame, d: DisparityMap, name: str) -> None:
    if d.scale_stride != 1:
        raise ShapeError(f"{name} must be at stride 1")
    if d.size != frame.size:
        raise ShapeError(f"{name} {d.size} does not match frame {frame.size}")


def scs_forward(frame: StereoFrame, temporal_context: DisparityMap, prev_frame_disparity: DisparityMap,
                scs_index: int, state: RecSM) -> tuple[DisparityMap, tuple[DisparityMap, ...]]:
    _check_prior(frame, temporal_context, "temporal context")
    _check_prior(frame, prev_frame_disparity, "previous-frame disparity")
    left, right = frame.batched()
    squeeze = frame.left.dim() == 3
    fl, fr = state.features(left, right)
    refined, out = state.scs(scs_index, fl, fr, left, temporal_context.batched(), prev_frame_disparity.batched())
    return _wrap(refined, squeeze), tuple(_wrap(out.branches[s], squeeze) for s in SCALES)


def run_frame(frame: StereoFrame, prev_disparity: DisparityMap, state: RecSM) -> FrameResult:
    _check_prior(frame, prev_disparity, "previous disparity")
    left, right = frame.batched()
    prev = prev_disparity.batched()
    out = state(left, right, prev)
    if not torch.isfinite(out.final).all():
        raise NumericError("non-finite disparity output")
    return _to_result(out, prev, frame.left.dim() == 3)


def run_sequence(seq: StereoSequence, d0: DisparityMap, state: RecSM) -> list[FrameResult]:
    """Frame 0 starts from ``d0``; frame n starts from frame n-1's final output."""
    if len(seq) == 0:
        raise ConfigError("sequence is empty")
    _check_prior(seq.frames[0], d0, "d0")
    results = []
    prev = d0
    with torch.no_grad():
        for frame in seq.frames:
            result = run_frame(frame, prev, state)
            results.append(result)
            prev = result.final_disparity
    return results
