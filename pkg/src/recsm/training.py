"""Losses, learning-rate schedule, training loop, checkpoints and gradient checking."""
from __future__ import annotations

import copy
import csv
import json
import logging
import tempfile
import warnings
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datamodel import ConfigError, FormatError, LossWeights, NumericError
from .dataio import TrainingSample, crop_sample, random_crop_window
from .evaluation import d1_all_tensor, epe_tensor
from .mrem import SCALES
from .pipeline import FrameOutput, ModelConfig, RecSM

log = logging.getLogger(__name__)

SMOOTH_L1_BETA = 1.0
METRICS_HEADER = ("epoch", "loss", "epe", "d1_all", "lr")
CHECKPOINT_VERSION = 1


class EmptyMaskWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    crop_h: int = 256
    crop_w: int = 512
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_epochs: int = 10
    plateau_end_epoch: int = 300
    final_epoch: int = 700
    lr_start: float = 5.8e-5
    lr_peak: float = 4e-4
    lr_final: float = 2e-6
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    epochs: int | None = None  # how many epochs to run; None -> final_epoch
    max_steps: int | None = None
    checkpoint_every: int = 0  # epochs; 0 -> only the final checkpoint

    def __post_init__(self):
        if not 0 < self.lr_start < self.lr_peak or not self.lr_final < self.lr_peak:
            raise ConfigError("learning rates must satisfy 0 < lr_start < lr_peak and lr_final < lr_peak")
        if not 0 <= self.warmup_epochs < self.plateau_end_epoch < self.final_epoch:
            raise ConfigError("schedule knots must satisfy warmup < plateau_end < final_epoch")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lw = d.pop("loss_weights", None)
        if lw is not None:
            lw = LossWeights(
                branch_weights=tuple(lw.get("branch_weights", (0.5, 0.7, 0.9))),
                scs_weights=tuple(lw["scs_weights"]) if lw.get("scs_weights") is not None else None,
                dom_weight=lw.get("dom_weight", 0.0),
            )
            d["loss_weights"] = lw
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at_epoch(e: float, cfg: TrainConfig) -> float:
    """Linear warm-up, constant plateau, then linear decay to ``lr_final``."""
    if e < 0:
        raise ConfigError("epoch must be non-negative")
    if e >= cfg.final_epoch:
        return cfg.lr_final
    if e < cfg.warmup_epochs:
        t = e / cfg.warmup_epochs
        return cfg.lr_start + t * (cfg.lr_peak - cfg.lr_start)
    if e <= cfg.plateau_end_epoch:
        return cfg.lr_peak
    t = (e - cfg.plateau_end_epoch) / (cfg.final_epoch - cfg.plateau_end_epoch)
    return cfg.lr_peak + t * (cfg.lr_final - cfg.lr_peak)


def smooth_l1(x: torch.Tensor, beta: float = SMOOTH_L1_BETA) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def masked_smooth_l1(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ConfigError(f"shape mismatch: pred {tuple(pred.shape)}, gt {tuple(gt.shape)}, mask {tuple(mask.shape)}")
    n = mask.sum()
    if n == 0:
        warnings.warn("no valid pixels; loss defined as 0", EmptyMaskWarning, stacklevel=3)
        return pred.sum() * 0.0
    return smooth_l1(pred - gt)[mask].sum() / n


def branch_loss(branch_disparities, gt: torch.Tensor, valid_mask: torch.Tensor,
                weights: Sequence[float] = (0.5, 0.7, 0.9)) -> torch.Tensor:
    """Weighted smooth-L1 over the (small, medium, large) branch outputs at full resolution."""
    if isinstance(branch_disparities, dict):
        branch_disparities = [branch_disparities[s] for s in SCALES]
    return sum(w * masked_smooth_l1(d, gt, valid_mask) for w, d in zip(weights, branch_disparities))


def total_loss(per_scs_losses: Sequence, lambdas: Sequence[float]):
    if len(per_scs_losses) != len(lambdas):
        raise ConfigError(f"{len(per_scs_losses)} SCS losses but {len(lambdas)} weights")
    return sum(lam * loss for lam, loss in zip(lambdas, per_scs_losses))


def model_loss(out: FrameOutput, model: RecSM, gt: torch.Tensor, mask: torch.Tensor,
               weights: LossWeights) -> tuple[torch.Tensor, list[torch.Tensor]]:
    per_scs = []
    for refined, mrem_out in zip(out.per_scs, out.per_scs_mrem):
        loss = branch_loss(mrem_out.branches, gt, mask, weights.branch_weights)
        if model.cfg.use_dom and weights.dom_weight > 0:
            loss = loss + weights.dom_weight * masked_smooth_l1(refined, gt, mask)
        per_scs.append(loss)
    return total_loss(per_scs, weights.lambdas(model.k)), per_scs


def collate(samples: Sequence[TrainingSample], dtype=torch.float32):
    left = torch.stack([s.left for s in samples]).to(dtype)
    right = torch.stack([s.right for s in samples]).to(dtype)
    prior = torch.stack([s.prior for s in samples]).to(dtype)
    gt = torch.stack([s.gt for s in samples]).to(dtype)
    valid = torch.stack([s.valid for s in samples])
    return left, right, prior, gt, valid


# ---------------------------------------------------------------------------
# checkpoints: zip archive, manifest.json + little-endian float32 blobs


def save_checkpoint(model: RecSM, path, epoch: int = 0, seed: int = 0,
                    train_cfg: TrainConfig | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    lambdas = (train_cfg.loss_weights if train_cfg else LossWeights()).lambdas(model.k)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "epoch": epoch,
        "lambda": list(lambdas),
        "seed": seed,
        "tensors": {name: list(t.shape) for name, t in state.items()},
    }
    if extra:
        manifest.update(extra)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, t in state.items():
            zf.writestr(f"params/{name}", t.detach().cpu().numpy().astype("<f4").tobytes())
    return path


def load_checkpoint(path) -> tuple[RecSM, dict]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version")
            model = RecSM(ModelConfig.from_dict(manifest["model_config"]))
            state = {}
            for name, shape in manifest["tensors"].items():
                arr = np.frombuffer(zf.read(f"params/{name}"), dtype="<f4").reshape(shape)
                state[name] = torch.from_numpy(arr.copy())
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{path}: not a valid checkpoint ({exc})") from exc
    model.load_state_dict(state)
    return model, manifest


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: RecSM
    metrics: list[dict]
    steps: int
    final_loss: float


def _batches(samples, cfg: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for i in range(0, len(order), cfg.batch_size):
        batch = []
        for j in order[i:i + cfg.batch_size]:
            s = samples[int(j)]
            h, w = s.gt.shape
            y, x = random_crop_window(h, w, cfg.crop_h, cfg.crop_w, rng)
            batch.append(crop_sample(s, y, x, cfg.crop_h, cfg.crop_w))
        yield batch


def _dump_batch(batch, out_dir) -> Path:
    folder = Path(out_dir) if out_dir else Path(tempfile.mkdtemp(prefix="recsm_"))
    folder.mkdir(parents=True, exist_ok=True)
    path = folder / "nonfinite_batch.pt"
    torch.save([vars(s) for s in batch], path)
    return path


def write_metrics_csv(metrics: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in METRICS_HEADER})


def train(samples: Sequence[TrainingSample], model: RecSM, cfg: TrainConfig, out_dir=None,
          on_epoch_end=None) -> TrainResult:
    """Adam over shuffled, randomly cropped batches; one epoch is one pass over ``samples``.

    ``on_epoch_end(epoch, model, row)`` is called after every epoch, e.g. for held-out tracking.
    """
    if not samples:
        raise ConfigError("training set is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr_at_epoch(0, cfg), betas=(cfg.beta1, cfg.beta2))
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    epochs = cfg.epochs if cfg.epochs is not None else cfg.final_epoch
    metrics, steps, last_loss = [], 0, float("nan")
    model.train()
    for epoch in range(epochs):
        lr = lr_at_epoch(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        sums = {"loss": 0.0, "epe": 0.0, "d1_all": 0.0}
        n_batches = 0
        for batch in _batches(samples, cfg, rng):
            left, right, prior, gt, valid = collate(batch)
            out = model(left, right, prior)
            loss, _ = model_loss(out, model, gt, valid, cfg.loss_weights)
            if not torch.isfinite(loss):
                dump = _dump_batch(batch, out_dir)
                raise NumericError(f"non-finite loss at epoch {epoch}, step {steps}; batch saved to {dump}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            steps += 1
            last_loss = loss.item()
            with torch.no_grad():
                sums["loss"] += last_loss
                if valid.any():
                    sums["epe"] += epe_tensor(out.final, gt, valid).item()
                    sums["d1_all"] += d1_all_tensor(out.final, gt, valid).item()
            n_batches += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        row = {"epoch": epoch, "lr": lr, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        metrics.append(row)
        log.debug("epoch %d loss %.4f epe %.3f d1 %.2f", epoch, row["loss"], row["epe"], row["d1_all"])
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, row)
            model.train()
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"checkpoint_{epoch:04d}.zip", epoch, cfg.seed, cfg)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    model.eval()
    if out_dir:
        write_metrics_csv(metrics, out_dir / "metrics.csv")
        save_checkpoint(model, out_dir / "checkpoint.zip", len(metrics) - 1, cfg.seed, cfg)
    return TrainResult(model, metrics, steps, last_loss)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    rejected: int  # draws skipped because the loss has a kink within the stencil

    def __float__(self):
        return self.max_rel_error


def gradient_check(model: RecSM, sample: TrainingSample, n_params: int = 50, step: float = 1e-5,
                   seed: int = 0, weights: LossWeights | None = None, floor: float = 1e-6,
                   parameter_filter=None, kink_tol: float = 1e-5, max_draws: int | None = None) -> GradCheckResult:
    """Compare autograd with central differences on ``n_params`` random parameter entries.

    Runs on a float64 copy of ``model``. Entries are drawn by first picking a
    parameter tensor uniformly, then an element uniformly. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.

    The network is piecewise smooth (leaky ReLU, clamps, interpolation cells),
    so a finite difference straddling a kink is not a valid reference. Each
    entry is differenced with steps ``h`` and ``h/2``; when those two estimates
    disagree by more than ``kink_tol`` (relative) the draw is rejected and
    replaced. The rejection count is reported so callers can bound it.
    """
    weights = weights or LossWeights()
    m = copy.deepcopy(model).double()
    left, right, prior, gt, valid = collate([sample], torch.float64)

    def loss_fn():
        out = m(left, right, prior)
        return model_loss(out, m, gt, valid, weights)[0]

    named = [(n, p) for n, p in m.named_parameters() if parameter_filter is None or parameter_filter(n)]
    if not named:
        raise ConfigError("no parameters selected for the gradient check")
    m.zero_grad(set_to_none=True)
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    max_draws = max_draws or 4 * n_params
    worst, checked, rejected = 0.0, 0, 0

    def central(flat, idx, orig, h):
        flat[idx] = orig + h
        f_plus = loss_fn().item()
        flat[idx] = orig - h
        f_minus = loss_fn().item()
        flat[idx] = orig
        return (f_plus - f_minus) / (2 * h)

    with torch.no_grad():
        while checked < n_params and checked + rejected < max_draws:
            name, p = named[int(rng.integers(len(named)))]
            idx = int(rng.integers(p.numel()))
            analytic = p.grad.view(-1)[idx].item() if p.grad is not None else 0.0
            flat = p.view(-1)
            orig = flat[idx].item()
            coarse = central(flat, idx, orig, step)
            numeric = central(flat, idx, orig, step / 2)
            if abs(coarse - numeric) > kink_tol * max(abs(coarse), abs(numeric), floor):
                rejected += 1
                log.debug("kink near %s[%d]: %.3e vs %.3e", name, idx, coarse, numeric)
                continue
            checked += 1
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return GradCheckResult(worst, checked, rejected)
