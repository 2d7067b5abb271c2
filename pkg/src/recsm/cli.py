"""Command-line entry point: ``recsm <command> [options]`` or ``python3 -m recsm``.

Failures print a single ``error: <category>: <message>`` line to stderr and
exit with status 1. Usage errors (unknown flags, bad choices) exit with 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import torch

from .ablation import SUITES, run_ablation
from .datamodel import ConfigError, DisparityMap, RecSMError, StereoSequence
from .dataio import (
    SyntheticSceneConfig,
    generate_sequence,
    iterate_training_tuples,
    load_manifest,
    load_sequence,
    read_disparity_png16,
    save_sequence,
    write_disparity_png16,
    write_manifest,
)
from .evaluation import EvalReport, count_params, d1_all_tensor, epe_tensor, estimate_macs
from .pipeline import ModelConfig, RecSM, run_sequence
from .presets import DESK_STEPS, DESK_TRAIN, EVAL_SEEDS, TRAIN_SEEDS, desk_model, desk_run_config, synthetic_samples
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("recsm")


# ---------------------------------------------------------------------------
# config file: {"model": {...}, "train": {...}, "data": {...}}, every section optional


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return raw


def model_config(cfg: dict) -> ModelConfig:
    if "model" not in cfg:
        return desk_model(k=3)
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict, seed: int) -> TrainConfig:
    base = TrainConfig.from_dict(cfg["train"]) if "train" in cfg else DESK_TRAIN
    return replace(base, seed=seed)


def scene_config(cfg: dict, seed: int, **overrides) -> SyntheticSceneConfig:
    data = dict(cfg.get("data", {}))
    unknown = set(data) - {f.name for f in fields(SyntheticSceneConfig)}
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    for key in ("object_size", "object_disparity", "background_disparity", "change_edges", "change_targets"):
        if key in data:
            data[key] = tuple(data[key])
    data.update({k: v for k, v in overrides.items() if v is not None})
    data["seed"] = seed
    return SyntheticSceneConfig(**data)


def _model_from(args, cfg) -> RecSM:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        return model.eval()
    torch.manual_seed(args.seed)
    return RecSM(model_config(cfg)).eval()


def _d0(seq: StereoSequence, path) -> DisparityMap:
    if path:
        return read_disparity_png16(path)
    if not seq.disparities or seq.disparities[0] is None:
        raise ConfigError("frame 0 has no ground truth; pass --d0")
    first = seq.dense[0] if seq.dense and seq.dense[0] is not None else seq.disparities[0]
    return DisparityMap(first.values, 1)


def _predict(model, manifest, seq_ids, d0_path):
    for sid in seq_ids:
        seq = load_sequence(manifest, sid)
        yield sid, seq, run_sequence(seq, _d0(seq, d0_path), model)


def _seq_ids(manifest, requested):
    if requested is None:
        return list(manifest.sequences)
    missing = [s for s in requested if s not in manifest.sequences]
    if missing:
        raise ConfigError(f"sequences not in manifest: {missing}")
    return requested


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg) -> None:
    out = Path(args.out_dir)
    manifest = None
    for i in range(args.sequences):
        scene = scene_config(cfg, args.seed + i, frames=args.frames, height=args.height, width=args.width)
        manifest = save_sequence(generate_sequence(scene), out, f"{i:04d}", manifest)
    path = write_manifest(manifest)
    print(f"wrote {args.sequences} sequence(s) to {path}")


def cmd_train(args, cfg) -> None:
    tcfg = train_config(cfg, args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, max_steps=args.steps)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.data:
        samples = list(iterate_training_tuples(load_manifest(args.data)))
    else:
        samples = synthetic_samples(TRAIN_SEEDS)
    model = _model_from(args, cfg)
    result = train(samples, model, tcfg, out_dir=args.out_dir)
    last = result.metrics[-1]
    print(f"trained {result.steps} steps: loss {last['loss']:.4f} epe {last['epe']:.3f} d1_all {last['d1_all']:.2f}%")
    print(f"checkpoint: {Path(args.out_dir) / 'checkpoint.zip'}")


def cmd_infer(args, cfg) -> None:
    model = _model_from(args, cfg)
    manifest = load_manifest(args.data)
    out = Path(args.out_dir)
    n = 0
    for sid, seq, results in _predict(model, manifest, _seq_ids(manifest, args.sequence), args.d0):
        folder = out / f"seq_{sid}"
        folder.mkdir(parents=True, exist_ok=True)
        for frame, res in zip(seq.frames, results):
            write_disparity_png16(res.final_disparity, folder / f"disp_{frame.frame_index:04d}.png")
            n += 1
    print(f"wrote {n} disparity map(s) to {out}")


def cmd_eval(args, cfg) -> None:
    manifest = load_manifest(args.data)
    seq_ids = _seq_ids(manifest, args.sequence)
    report = EvalReport()
    if args.pred_dir:
        for sid in seq_ids:
            for f in manifest.sequences[sid]:
                if f.disp is None:
                    continue
                pred = read_disparity_png16(Path(args.pred_dir) / f"seq_{sid}" / f"disp_{f.index:04d}.png")
                _score(report, f"{sid}/{f.index}", pred, read_disparity_png16(manifest.root / f.disp))
    else:
        model = _model_from(args, cfg)
        report.k, report.r_schedule = model.k, model.scs_config.r_schedule.per_scs
        report.params = count_params(model)
        for sid, seq, results in _predict(model, manifest, seq_ids, args.d0):
            # with the default d0 (ground truth of frame 0) frame 0 is not a fair test
            start = 0 if args.d0 else 1
            for n in range(start, len(seq)):
                if seq.disparities[n] is not None:
                    _score(report, f"{sid}/{n}", results[n].final_disparity, seq.disparities[n])
    if not report.per_frame:
        raise ConfigError("no frames with ground truth to evaluate")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "per_frame.csv")
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2))
    print(f"epe {report.epe:.4f} px  d1_all {report.d1_all:.2f}%  frames {len(report.per_frame)}")


def _score(report: EvalReport, frame, pred: DisparityMap, gt: DisparityMap) -> None:
    from .evaluation import default_mask

    mask = default_mask(gt)
    p, g = pred.values.double(), gt.values.double()
    if p.shape != g.shape:
        raise ConfigError(f"frame {frame}: prediction {tuple(p.shape)} vs ground truth {tuple(g.shape)}")
    if not mask.any():
        report.per_frame.append({"frame": frame, "epe": None, "d1_all": None, "seconds": None})
        return
    report.per_frame.append({"frame": frame, "epe": float(epe_tensor(p, g, mask)),
                             "d1_all": float(d1_all_tensor(p, g, mask)), "seconds": None})


def cmd_ablate(args, cfg) -> None:
    base = model_config(cfg) if "model" in cfg else desk_model(k=args.k)
    if args.data:
        train_samples = list(iterate_training_tuples(load_manifest(args.data)))
        eval_samples = list(iterate_training_tuples(load_manifest(args.eval_data or args.data)))
    else:
        train_samples, eval_samples = synthetic_samples(TRAIN_SEEDS), synthetic_samples(EVAL_SEEDS)
    if "train" in cfg:
        tcfg = replace(train_config(cfg, args.seed), max_steps=args.steps)
    else:
        tcfg = desk_run_config(len(train_samples), args.steps, seed=args.seed)
    seeds = args.seeds or [args.seed]
    table = run_ablation(args.suite, train_samples, eval_samples, base, tcfg, seeds=seeds, out_dir=args.out_dir)
    for r in table.rows:
        print(f"{r['variant']},seed={r['seed']},epe={r['epe']:.4f},d1_all={r['d1_all']:.3f},runtime_s={r['runtime_s']:.4f}")
    print(f"table: {Path(args.out_dir) / (args.suite + '.csv')}")


def cmd_inspect(args, cfg) -> None:
    model = _model_from(args, cfg)
    schedule = model.scs_config.r_schedule.per_scs
    print(f"K: {model.k}")
    print(f"R schedule: {schedule}")
    print(f"temporal attention: {model.cfg.use_temporal_attention}  dom: {model.cfg.use_dom}  shared dom: {model.cfg.shared_dom}")
    print(f"params: {count_params(model)}")
    print(f"MACs @ {args.height}x{args.width}: {estimate_macs(model, args.height, args.width)}")


def cmd_plot(args, cfg) -> None:
    from . import plots

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done = []
    if args.metrics:
        plots.plot_metrics(args.metrics, out / "metrics.png")
        done.append("metrics.png")
    if args.stack_table:
        plots.plot_stack_count(args.stack_table, out / "stack_count.png")
        done.append("stack_count.png")
    if args.pred and args.gt:
        pred, gt = read_disparity_png16(args.pred), read_disparity_png16(args.gt)
        from .evaluation import default_mask

        plots.error_heatmap(pred.values.numpy(), gt.values.numpy(), default_mask(gt).numpy(), out / "error_heatmap.png")
        done.append("error_heatmap.png")
    if not done:
        raise ConfigError("nothing to plot; pass --metrics, --stack-table, or --pred with --gt")
    print("wrote " + ", ".join(str(out / d) for d in done))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with optional model/train/data sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="recsm", description="Recursive residual video stereo.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic stereo video dataset")
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="manifest.json; default: built-in synthetic training set")
    p.add_argument("--checkpoint", help="start from these weights")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "write disparity PNGs for each frame"),
                                 ("eval", cmd_eval, "score predictions or a checkpoint against ground truth")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", required=True, help="manifest.json")
        p.add_argument("--checkpoint")
        p.add_argument("--sequence", nargs="+", help="sequence ids (default: all)")
        p.add_argument("--d0", help="16-bit PNG disparity for frame 0 (default: its ground truth)")
        if name == "eval":
            p.add_argument("--pred-dir", help="evaluate these PNGs instead of running a model")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", parents=[common], help="train and score the variants of one ablation")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--k", type=int, default=1, help="K of the base model when --config has no model section")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int, default=DESK_STEPS)
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", parents=[common], help="print K, R schedule, parameter and MAC counts")
    p.add_argument("--checkpoint")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("plot", parents=[common], help="training curves, error heatmaps, stack-count figure")
    p.add_argument("--metrics", help="metrics.csv written by train")
    p.add_argument("--stack-table", help="stack_count.csv written by ablate")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except RecSMError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
