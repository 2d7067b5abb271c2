"""Disparity metrics, parameter / MAC counters, and per-frame evaluation reports."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .datamodel import MAX_VALID_DISPARITY, DisparityMap, ShapeError, UndefinedMetricError

D1_ABS_PX = 3.0
D1_REL = 0.05
RUNTIME_WARMUP_FRAMES = 3


def _check(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> None:
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ShapeError(f"pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, mask {tuple(mask.shape)} differ")
    if not mask.any():
        raise UndefinedMetricError("no valid pixels")


def epe_tensor(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    _check(pred, gt, mask)
    return (pred - gt).abs()[mask].mean()


def d1_all_tensor(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Percentage of valid pixels whose error exceeds both 3 px and 5% of the ground truth."""
    _check(pred, gt, mask)
    err = (pred - gt).abs()
    bad = (err > D1_ABS_PX) & (err > D1_REL * gt.abs())
    return 100.0 * bad[mask].double().mean()


def default_mask(gt: DisparityMap) -> torch.Tensor:
    mask = (gt.values > 0) & (gt.values < MAX_VALID_DISPARITY)
    return mask & gt.valid if gt.valid is not None else mask


def _values(d) -> torch.Tensor:
    return d.values if isinstance(d, DisparityMap) else d


def epe(pred, gt, mask: torch.Tensor | None = None) -> float:
    if mask is None:
        mask = default_mask(gt) if isinstance(gt, DisparityMap) else torch.ones_like(_values(gt), dtype=torch.bool)
    return float(epe_tensor(_values(pred).double(), _values(gt).double(), mask))


def d1_all(pred, gt, mask: torch.Tensor | None = None) -> float:
    if mask is None:
        mask = default_mask(gt) if isinstance(gt, DisparityMap) else torch.ones_like(_values(gt), dtype=torch.bool)
    return float(d1_all_tensor(_values(pred).double(), _values(gt).double(), mask))


def count_params(model: nn.Module) -> int:
    """Unique trainable entries; a shared module is counted once."""
    return sum(p.numel() for p in model.parameters())


def conv_macs(module: nn.Module, output: torch.Tensor) -> int:
    kernel = 1
    for k in module.kernel_size:
        kernel *= k
    per_output = kernel * module.in_channels // module.groups
    return per_output * output[0].numel()


def estimate_macs(model: nn.Module, height: int, width: int) -> int:
    """Multiply-accumulates of every convolution call in one forward pass (batch of 1).

    Shared modules are counted once per call. Non-convolution operations
    (warping, softmax, interpolation) are ignored.
    """
    total = 0

    def hook(module, _inputs, output):
        nonlocal total
        total += conv_macs(module, output)

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Conv3d))]
    try:
        p = next(model.parameters())
        with torch.no_grad():
            if hasattr(model, "mrems"):
                img = torch.zeros(1, 3, height, width, dtype=p.dtype)
                model(img, img, torch.zeros(1, height, width, dtype=p.dtype))
            else:
                in_ch = next(m for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Conv3d))).in_channels
                model(torch.zeros(1, in_ch, height, width, dtype=p.dtype))
    finally:
        for h in handles:
            h.remove()
    return total


@dataclass
class EvalReport:
    per_frame: list[dict] = field(default_factory=list)  # frame, epe, d1_all, seconds
    k: int = 0
    r_schedule: tuple = ()
    params: int = 0
    macs: int = 0

    @property
    def epe(self) -> float:
        vals = [f["epe"] for f in self.per_frame if f["epe"] is not None]
        return sum(vals) / len(vals) if vals else float("nan")

    @property
    def d1_all(self) -> float:
        vals = [f["d1_all"] for f in self.per_frame if f["d1_all"] is not None]
        return sum(vals) / len(vals) if vals else float("nan")

    @property
    def runtime(self) -> float:
        """Median seconds per frame, skipping warm-up frames when there are enough of them."""
        secs = [f["seconds"] for f in self.per_frame if f.get("seconds") is not None]
        if len(secs) > RUNTIME_WARMUP_FRAMES:
            secs = secs[RUNTIME_WARMUP_FRAMES:]
        return statistics.median(secs) if secs else float("nan")

    def summary(self) -> dict:
        return {
            "epe": self.epe,
            "d1_all": self.d1_all,
            "runtime_s": self.runtime,
            "frames": len(self.per_frame),
            "k": self.k,
            "r_schedule": [list(e) for e in self.r_schedule],
            "params": self.params,
            "macs": self.macs,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["frame", "epe", "d1_all", "seconds"])
            writer.writeheader()
            for row in self.per_frame:
                writer.writerow({k: row.get(k) for k in writer.fieldnames})


def evaluate_samples(model, samples, which: str = "final") -> EvalReport:
    """Run ``model`` on each held-out tuple (prior = previous frame's ground truth).

    ``which`` picks the scored output: ``"final"``, ``"scs<i>"`` (0-based
    unit), or ``"small"`` / ``"medium"`` / ``"large"`` (first unit's branches).
    """
    from .pipeline import RecSM

    report = EvalReport()
    if isinstance(model, RecSM):
        report.k = model.k
        report.r_schedule = model.scs_config.r_schedule.per_scs
        report.params = count_params(model)
    model.eval()
    with torch.no_grad():
        for i, s in enumerate(samples):
            t0 = time.perf_counter()
            out = model(s.left.unsqueeze(0), s.right.unsqueeze(0), s.prior.unsqueeze(0))
            seconds = time.perf_counter() - t0
            if which == "final":
                pred = out.final
            elif which.startswith("scs"):
                pred = out.per_scs[int(which[3:])]
            else:
                pred = out.per_scs_mrem[0].branches[which]
            gt, mask = s.gt.unsqueeze(0), s.valid.unsqueeze(0)
            if mask.any():
                row = {"frame": i, "epe": float(epe_tensor(pred.double(), gt.double(), mask)),
                       "d1_all": float(d1_all_tensor(pred.double(), gt.double(), mask)), "seconds": seconds}
            else:
                row = {"frame": i, "epe": None, "d1_all": None, "seconds": seconds}
            report.per_frame.append(row)
    return report


def time_model(model, samples, repeats: int = 1) -> float:
    """Median wall-clock seconds per forward pass after the warm-up frames."""
    secs = []
    model.eval()
    with torch.no_grad():
        for _ in range(repeats):
            for s in samples:
                t0 = time.perf_counter()
                model(s.left.unsqueeze(0), s.right.unsqueeze(0), s.prior.unsqueeze(0))
                secs.append(time.perf_counter() - t0)
    if len(secs) > RUNTIME_WARMUP_FRAMES:
        secs = secs[RUNTIME_WARMUP_FRAMES:]
    return statistics.median(secs)
