"""Figures: training curves, per-pixel error heatmaps, and accuracy/runtime versus K."""
from __future__ import annotations

import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ERROR_CMAP = "inferno"
ERROR_VMAX = 8.0  # px; errors above this saturate so heatmaps stay comparable across runs


def _read(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_metrics(metrics_csv, out_png) -> None:
    rows = _read(metrics_csv)
    epoch = [float(r["epoch"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, key in zip(axes, ("loss", "epe", "d1_all")):
        ax.plot(epoch, [float(r[key]) for r in rows])
        ax.set_xlabel("epoch")
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)


def error_heatmap(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray, out_png) -> None:
    err = np.where(valid, np.abs(pred - gt), np.nan)
    fig, ax = plt.subplots(figsize=(6, 3.4))
    im = ax.imshow(err, cmap=ERROR_CMAP, vmin=0.0, vmax=ERROR_VMAX)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.03, label="|error| px")
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)


def plot_stack_count(table_csv, out_png) -> None:
    """Mean D1-all and runtime per K, one point per K averaged over seeds."""
    by_k = defaultdict(list)
    for r in _read(table_csv):
        by_k[int(r["k"])].append((float(r["d1_all"]), float(r["runtime_s"])))
    ks = sorted(by_k)
    d1 = [np.mean([v[0] for v in by_k[k]]) for k in ks]
    rt = [np.mean([v[1] for v in by_k[k]]) for k in ks]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.plot(ks, d1, "o-")
    a.set_xlabel("K")
    a.set_ylabel("D1-all (%)")
    b.plot(ks, [1000 * t for t in rt], "s-")
    b.set_xlabel("K")
    b.set_ylabel("runtime (ms / frame)")
    for ax in (a, b):
        ax.set_xticks(ks)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
