"""Train-and-evaluate harness for the component ablations.

Every variant of a suite is trained from the same seed on the same data; the
variants differ in exactly one model-config field (``config_diff`` checks this).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .datamodel import ConfigError
from .evaluation import count_params, evaluate_samples, time_model
from .pipeline import ModelConfig, RecSM, default_r_schedule, fixed_r_schedule
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger(__name__)

SUITES = ("scales", "temporal_attention", "dynamic_r", "dom", "shared_weights", "stack_count")
CSV_FIELDS = ("suite", "variant", "seed", "k", "epe", "d1_all", "runtime_s", "params")


def variant_configs(suite: str, base: ModelConfig) -> dict[str, ModelConfig]:
    if suite == "scales":
        return {"base": base}
    if suite == "temporal_attention":
        return {"ta_off": replace(base, use_temporal_attention=False),
                "ta_on": replace(base, use_temporal_attention=True)}
    if suite == "dynamic_r":
        if base.k < 2:
            raise ConfigError("the dynamic-R ablation needs K >= 2")
        return {"fixed_r": replace(base, r_schedule=fixed_r_schedule(base.k).per_scs),
                "dynamic_r": replace(base, r_schedule=default_r_schedule(base.k).per_scs)}
    if suite == "dom":
        return {"mrem_only": replace(base, use_dom=False), "mrem_dom": replace(base, use_dom=True)}
    if suite == "shared_weights":
        if base.k < 2:
            raise ConfigError("the shared-weight ablation needs K >= 2")
        return {"separate": replace(base, use_dom=True, shared_dom=False),
                "shared": replace(base, use_dom=True, shared_dom=True)}
    if suite == "stack_count":
        return {f"k{k}": replace(base, k=k, r_schedule=None) for k in (1, 2, 3)}
    raise ConfigError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


def config_diff(a: ModelConfig, b: ModelConfig) -> set[str]:
    da, db = asdict(a), asdict(b)
    return {k for k in da if da[k] != db[k]}


@dataclass
class AblationTable:
    suite: str
    rows: list[dict] = field(default_factory=list)

    def where(self, **kw) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in kw.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row.get(k) for k in CSV_FIELDS})


def data_fingerprint(samples: Sequence) -> str:
    """Hash of every training tuple's tensors, so cached runs are never reused across datasets."""
    h = hashlib.sha1()
    for s in samples:
        for t in (s.left, s.right, s.prior, s.gt, s.valid):
            h.update(str(tuple(t.shape)).encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:12]


def run_key(cfg: ModelConfig, train_cfg: TrainConfig, seed: int, data: str = "") -> str:
    """Stable name for one training run; suites that train an identical model on the same data share it."""
    blob = json.dumps({"model": cfg.to_dict(), "train": replace(train_cfg, seed=seed).to_dict(), "data": data},
                      sort_keys=True, default=list)
    return f"k{cfg.k}_{hashlib.sha1(blob.encode()).hexdigest()[:10]}_seed{seed}"


def train_variant(cfg: ModelConfig, train_samples, train_cfg: TrainConfig, seed: int, out_dir=None) -> RecSM:
    """Seeded init + training; reuses ``out_dir/checkpoint.zip`` when a previous run finished."""
    if out_dir is not None and (Path(out_dir) / "checkpoint.zip").exists():
        model, _ = load_checkpoint(Path(out_dir) / "checkpoint.zip")
        log.info("resumed %s from checkpoint", out_dir)
        return model.eval()
    torch.manual_seed(seed)
    model = RecSM(cfg)
    train(train_samples, model, replace(train_cfg, seed=seed), out_dir=out_dir)
    return model.eval()


def run_ablation(suite: str, train_samples: Sequence, eval_samples: Sequence, base: ModelConfig,
                 train_cfg: TrainConfig, seeds: Sequence[int] = (0,), out_dir=None,
                 timing_repeats: int = 3, variants: Sequence[str] | None = None) -> AblationTable:
    """Train and score each variant per seed; ``variants`` restricts the suite to a subset by name."""
    configs = variant_configs(suite, base)
    if variants is not None:
        unknown = set(variants) - set(configs)
        if unknown:
            raise ConfigError(f"suite {suite!r} has no variants {sorted(unknown)}")
        configs = {n: configs[n] for n in variants}
    table = AblationTable(suite)
    root = Path(out_dir) if out_dir else None
    data = data_fingerprint(train_samples) if root else ""
    for seed in seeds:
        for name, cfg in configs.items():
            run_dir = root / "runs" / run_key(cfg, train_cfg, seed, data) if root else None
            model = train_variant(cfg, train_samples, train_cfg, seed, run_dir)
            runtime = time_model(model, eval_samples, repeats=timing_repeats)
            scored = ("small", "medium", "large") if suite == "scales" else ("final",)
            for which in scored:
                report = evaluate_samples(model, eval_samples, which)
                table.rows.append({
                    "suite": suite,
                    "variant": which if suite == "scales" else name,
                    "seed": seed,
                    "k": cfg.k,
                    "epe": report.epe,
                    "d1_all": report.d1_all,
                    "runtime_s": runtime,
                    "params": count_params(model),
                })
    if root:
        root.mkdir(parents=True, exist_ok=True)
        table.write_csv(root / f"{suite}.csv")
        if suite == "stack_count":
            from .plots import plot_stack_count

            plot_stack_count(root / f"{suite}.csv", root / f"{suite}.png")
    return table
