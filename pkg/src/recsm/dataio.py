"""Synthetic stereo video, KITTI-style PNG codecs, and dataset manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .datamodel import (
    MAX_VALID_DISPARITY,
    ConfigError,
    DisparityMap,
    FormatError,
    ShapeError,
    StereoFrame,
    StereoSequence,
    check_divisible,
)

MANIFEST_VERSION = 1
# change magnitudes above 3 px, by bin: (3,10], (10,20], (20,30]; the rest lands in the last bin
FIG3_TARGETS = (0.5937, 0.2562, 0.081)
FIG3_EDGES = (3, 10, 20, 30, 40)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    height: int = 64
    width: int = 128
    frames: int = 5
    num_objects: int = 3
    object_size: tuple[int, int] = (14, 30)
    object_disparity: tuple[int, int] = (12, 64)
    background_disparity: tuple[int, int] = (2, 8)  # top row, bottom row
    motion: str = "random"  # "random", "none" or "approach"
    max_lateral_speed: int = 1
    approach_step: int = 2
    small_change_prob: float = 0.3
    change_edges: tuple[int, ...] = FIG3_EDGES
    change_targets: tuple[float, ...] = FIG3_TARGETS
    texture_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        check_divisible(self.height, self.width)
        if self.frames < 1 or self.num_objects < 0:
            raise ConfigError("frames must be >= 1 and num_objects >= 0")
        if self.motion not in ("random", "none", "approach"):
            raise ConfigError(f"unknown motion mode {self.motion!r}")
        lo, hi = self.object_disparity
        if not 0 <= lo < hi <= 64:
            raise ConfigError("object disparities must lie within [0, 64]")
        if max(self.background_disparity) >= lo or min(self.background_disparity) < 1:
            raise ConfigError("background must be behind every object and have disparity >= 1")
        if len(self.change_edges) != len(self.change_targets) + 2:
            raise ConfigError("change_edges needs len(change_targets) + 2 entries")
        if any(t < 0 for t in self.change_targets) or sum(self.change_targets) > 1 + 1e-9:
            raise ConfigError("change targets must be non-negative and sum to at most 1")
        for (a, b), p in zip(zip(self.change_edges, self.change_edges[1:]), self.bin_targets):
            if p > 0 and (b <= a or a + 1 > hi - lo):
                raise ConfigError(f"change bin ({a}, {b}] cannot be produced inside disparity range {lo}..{hi}")

    @property
    def bin_targets(self) -> tuple[float, ...]:
        return tuple(self.change_targets) + (max(0.0, 1.0 - sum(self.change_targets)),)


@dataclass
class _Object:
    y: int
    x: int
    mask: np.ndarray
    texture: np.ndarray
    disparity: int
    vx: int


def _texture(rng, shape, sigma):
    noise = rng.random(shape + (3,))
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=(sigma, sigma, 0))
    lo, hi = noise.min(), noise.max()
    noise = (noise - lo) / max(hi - lo, 1e-12)
    # quantised to 8 bits so PNG round trips are exact
    return np.round(noise * 255.0) / 255.0


def _column_bounds(cfg, w):
    # objects stay where both views can see them: x >= max disparity
    x_lo, x_hi = cfg.object_disparity[1], cfg.width - w
    if x_hi < x_lo:
        raise ConfigError(f"width {cfg.width} too small for objects of width {w} at disparity {x_lo}")
    return x_lo, x_hi


def _new_object(rng, cfg: SyntheticSceneConfig) -> _Object:
    h, w = (int(v) for v in rng.integers(cfg.object_size[0], cfg.object_size[1] + 1, size=2))
    if rng.random() < 0.5:
        mask = np.ones((h, w), dtype=bool)
    else:
        yy, xx = np.mgrid[:h, :w]
        mask = ((yy - (h - 1) / 2) / (h / 2)) ** 2 + ((xx - (w - 1) / 2) / (w / 2)) ** 2 <= 1.0
    lo, hi = cfg.object_disparity
    disparity = int(rng.integers(lo, hi + 1))
    if cfg.motion == "approach":
        disparity = lo
    vx = 0 if cfg.motion == "none" else int(rng.integers(-cfg.max_lateral_speed, cfg.max_lateral_speed + 1))
    x_lo, x_hi = _column_bounds(cfg, w)
    return _Object(
        y=int(rng.integers(0, cfg.height - h + 1)),
        x=int(rng.integers(x_lo, x_hi + 1)),
        mask=mask,
        texture=_texture(rng, (h, w), cfg.texture_sigma),
        disparity=disparity,
        vx=vx,
    )


def _render(cfg, background, bg_disp, objects):
    """Render both views layer by layer; returns left, right, dense disparity, validity."""
    H, W = cfg.height, cfg.width
    cols = np.arange(W)
    left = background[:, :W].copy()
    right = np.empty_like(left)
    for y in range(H):
        right[y] = background[y, cols + bg_disp[y]]
    disp = np.repeat(bg_disp[:, None], W, axis=1).astype(np.float64)
    lab_l = np.zeros((H, W), dtype=np.int32)
    lab_r = np.zeros((H, W), dtype=np.int32)
    order = sorted(range(len(objects)), key=lambda i: (objects[i].disparity, i))
    for i in order:
        ob = objects[i]
        h, w = ob.mask.shape
        for view, shift in (("left", 0), ("right", ob.disparity)):
            # column c of the view shows object column c + shift - ob.x
            u = cols + shift - ob.x
            inside = (u >= 0) & (u < w)
            if not inside.any():
                continue
            c = cols[inside]
            uu = u[inside]
            for r in range(h):
                y = ob.y + r
                if not 0 <= y < H:
                    continue
                m = ob.mask[r, uu]
                cc = c[m]
                if view == "left":
                    left[y, cc] = ob.texture[r, uu[m]]
                    disp[y, cc] = ob.disparity
                    lab_l[y, cc] = i + 1
                else:
                    right[y, cc] = ob.texture[r, uu[m]]
                    lab_r[y, cc] = i + 1
    src = cols[None, :] - disp.astype(np.int64)
    valid = src >= 0
    rows = np.arange(H)[:, None].repeat(W, axis=1)
    valid &= lab_r[rows, np.clip(src, 0, W - 1)] == lab_l
    return left, right, disp, valid


def change_bin_counts(prev: np.ndarray, nxt: np.ndarray, mask: np.ndarray, edges=FIG3_EDGES) -> np.ndarray:
    """Pixel counts of |delta| per bin (edges[i], edges[i+1]]; the last bin is open-ended."""
    delta = np.abs(nxt - prev)[mask]
    delta = delta[delta > edges[0]]
    idx = np.searchsorted(np.asarray(edges[1:-1]), delta, side="left")
    return np.bincount(idx, minlength=len(edges) - 1)


def _pick_delta(rng, cfg, ob, counts, pending, area):
    lo, hi = cfg.object_disparity
    if rng.random() < cfg.small_change_prob:
        magnitudes = [m for m in range(0, cfg.change_edges[0] + 1)]
    else:
        targets = np.asarray(cfg.bin_targets)
        current = counts + pending
        deficit = targets * (current.sum() + area) - current
        magnitudes = []
        for b in np.argsort(-deficit, kind="stable"):
            if targets[b] <= 0:
                continue
            a, c = cfg.change_edges[b], cfg.change_edges[b + 1]
            magnitudes = [m for m in range(a + 1, c + 1) if ob.disparity + m <= hi or ob.disparity - m >= lo]
            if magnitudes:
                pending[b] += area
                break
    m = int(rng.choice(magnitudes)) if magnitudes else 0
    signs = [s for s in (1, -1) if lo <= ob.disparity + s * m <= hi]
    return int(rng.choice(signs)) * m


def generate_sequence(cfg: SyntheticSceneConfig) -> StereoSequence:
    """Textured fronto-parallel objects over a ground-plane background, rendered in both views.

    Disparities are integers, so sampling the right image at ``x - d(x)``
    reproduces the left image exactly wherever the point is visible in both.
    """
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.height, cfg.width
    top, bottom = cfg.background_disparity
    bg_disp = np.round(np.linspace(top, bottom, H)).astype(np.int64)
    background = _texture(rng, (H, W + int(bg_disp.max()) + 1), cfg.texture_sigma)
    objects = [_new_object(rng, cfg) for _ in range(cfg.num_objects)]
    if cfg.motion == "approach" and cfg.object_disparity[0] + cfg.approach_step * (cfg.frames - 1) > cfg.object_disparity[1]:
        raise ConfigError("approach motion leaves the disparity range within the sequence")

    counts = np.zeros(len(cfg.bin_targets))
    frames, gts, dense = [], [], []
    prev_disp = prev_valid = None
    for n in range(cfg.frames):
        if n > 0:
            pending = np.zeros_like(counts)
            for idx in rng.permutation(len(objects)):
                ob = objects[idx]
                if cfg.motion == "approach":
                    ob.disparity += cfg.approach_step
                elif cfg.motion == "random":
                    ob.disparity += _pick_delta(rng, cfg, ob, counts, pending, int(ob.mask.sum()))
                x_lo, x_hi = _column_bounds(cfg, ob.mask.shape[1])
                if not x_lo <= ob.x + ob.vx <= x_hi:
                    ob.vx = -ob.vx
                ob.x = min(max(ob.x + ob.vx, x_lo), x_hi)
        left, right, disp, valid = _render(cfg, background, bg_disp, objects)
        if n > 0:
            counts += change_bin_counts(prev_disp, disp, prev_valid & valid, cfg.change_edges)
        prev_disp, prev_valid = disp, valid
        to_img = lambda a: torch.from_numpy(a.transpose(2, 0, 1).astype(np.float32))
        frames.append(StereoFrame(to_img(left), to_img(right), n))
        d = torch.from_numpy(disp.astype(np.float32))
        gts.append(DisparityMap(d, 1, torch.from_numpy(valid)))
        dense.append(DisparityMap(d.clone(), 1))
    return StereoSequence(frames, gts, dense)


# ---------------------------------------------------------------------------
# files


def write_disparity_png16(d: DisparityMap | torch.Tensor | np.ndarray, path) -> None:
    """KITTI encoding: uint16 = round(256 * d), 0 marks invalid pixels."""
    valid = None
    if isinstance(d, DisparityMap):
        if d.scale_stride != 1:
            raise ShapeError("only full-resolution disparities can be written")
        valid = d.valid
        d = d.values
    arr = d.detach().cpu().numpy() if isinstance(d, torch.Tensor) else np.asarray(d)
    if arr.ndim != 2:
        raise ShapeError(f"expected [H, W], got {arr.shape}")
    enc = np.clip(np.round(arr.astype(np.float64) * 256.0), 0, 65535).astype(np.uint16)
    if valid is not None:
        enc[~(valid.cpu().numpy() if isinstance(valid, torch.Tensor) else np.asarray(valid))] = 0
    Image.fromarray(enc).save(path)


def read_disparity_png16(path) -> DisparityMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L"):
            raise FormatError(f"{path}: expected a 16-bit PNG, got mode {im.mode}")
        raw = np.array(im, dtype=np.uint16)
    values = torch.from_numpy(raw.astype(np.float32) / 256.0)
    return DisparityMap(values, 1, torch.from_numpy(raw > 0))


def write_image_png8(image: torch.Tensor, path) -> None:
    arr = image.detach().cpu().numpy().transpose(1, 2, 0)
    Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)).save(path)


def read_image_png8(path) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L", "RGBA"):
            raise FormatError(f"{path}: expected an 8-bit image, got mode {im.mode}")
        arr = np.array(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


@dataclass
class FrameEntry:
    index: int
    left: str
    right: str
    disp: str | None = None
    prior: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    sequences: dict[str, list[FrameEntry]] = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "sequences": [
                {"id": sid, "frames": [{k: v for k, v in vars(f).items() if v is not None} for f in frames]}
                for sid, frames in self.sequences.items()
            ],
        }


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if raw.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {raw.get('format_version')}")
    manifest = DatasetManifest(root=path.parent)
    missing = []
    for seq in raw["sequences"]:
        frames = [FrameEntry(**f) for f in seq["frames"]]
        if [f.index for f in frames] != list(range(len(frames))):
            raise FormatError(f"sequence {seq['id']}: frame indices must be contiguous from 0")
        for f in frames:
            for rel in (f.left, f.right, f.disp, f.prior):
                if rel is not None and not (manifest.root / rel).exists():
                    missing.append(str(manifest.root / rel))
        manifest.sequences[str(seq["id"])] = frames
    if missing:
        raise FileNotFoundError("missing dataset files: " + ", ".join(missing))
    return manifest


def save_sequence(seq: StereoSequence, root, seq_id: str = "0000", manifest: DatasetManifest | None = None) -> DatasetManifest:
    """Write ``seq_<id>/{left,right,disp,prior}_<n>.png`` and add the sequence to ``manifest``."""
    root = Path(root)
    manifest = manifest or DatasetManifest(root=root)
    folder = root / f"seq_{seq_id}"
    folder.mkdir(parents=True, exist_ok=True)
    entries = []
    for n, frame in enumerate(seq.frames):
        entry = FrameEntry(n, f"seq_{seq_id}/left_{n:04d}.png", f"seq_{seq_id}/right_{n:04d}.png")
        write_image_png8(frame.left, root / entry.left)
        write_image_png8(frame.right, root / entry.right)
        if n < len(seq.disparities) and seq.disparities[n] is not None:
            entry.disp = f"seq_{seq_id}/disp_{n:04d}.png"
            write_disparity_png16(seq.disparities[n], root / entry.disp)
        if n > 0 and n - 1 < len(seq.dense) and seq.dense[n - 1] is not None:
            entry.prior = f"seq_{seq_id}/prior_{n:04d}.png"
            write_disparity_png16(seq.dense[n - 1], root / entry.prior)
        entries.append(entry)
    manifest.sequences[seq_id] = entries
    return manifest


def write_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else manifest.root / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=2))
    return path


def load_sequence(manifest: DatasetManifest, seq_id: str) -> StereoSequence:
    frames, gts, dense = [], [], []
    entries = manifest.sequences[seq_id]
    for f in entries:
        frames.append(StereoFrame(read_image_png8(manifest.root / f.left), read_image_png8(manifest.root / f.right), f.index))
        gts.append(read_disparity_png16(manifest.root / f.disp) if f.disp else None)
    # the stored prior of frame n+1 is the dense map of frame n
    for n in range(len(entries)):
        nxt = entries[n + 1] if n + 1 < len(entries) else None
        dense.append(read_disparity_png16(manifest.root / nxt.prior) if nxt is not None and nxt.prior else None)
    return StereoSequence(frames, gts, dense)


# ---------------------------------------------------------------------------
# training tuples


@dataclass
class TrainingSample:
    left: torch.Tensor  # [3, H, W]
    right: torch.Tensor
    prior: torch.Tensor  # [H, W], disparity of the previous frame
    gt: torch.Tensor  # [H, W]
    valid: torch.Tensor  # [H, W] bool


def valid_mask(gt: torch.Tensor, extra: torch.Tensor | None = None) -> torch.Tensor:
    mask = (gt > 0) & (gt < MAX_VALID_DISPARITY)
    return mask & extra if extra is not None else mask


def sequence_samples(seq: StereoSequence) -> list[TrainingSample]:
    """One sample per frame n >= 1; the prior is frame n-1's dense (or sparse) ground truth."""
    samples = []
    for n in range(1, len(seq)):
        gt = seq.disparities[n]
        prior = seq.dense[n - 1] if n - 1 < len(seq.dense) and seq.dense[n - 1] is not None else seq.disparities[n - 1]
        if gt is None or prior is None:
            continue
        frame = seq.frames[n]
        samples.append(TrainingSample(frame.left, frame.right, prior.values, gt.values, valid_mask(gt.values, gt.valid)))
    return samples


def random_crop_window(height: int, width: int, crop_h: int, crop_w: int, rng: np.random.Generator) -> tuple[int, int]:
    if crop_h > height or crop_w > width:
        raise ConfigError(f"crop {crop_h}x{crop_w} larger than frame {height}x{width}")
    return int(rng.integers(0, height - crop_h + 1)), int(rng.integers(0, width - crop_w + 1))


def crop_sample(s: TrainingSample, y: int, x: int, h: int, w: int) -> TrainingSample:
    sl = (slice(y, y + h), slice(x, x + w))
    return TrainingSample(s.left[:, sl[0], sl[1]], s.right[:, sl[0], sl[1]], s.prior[sl], s.gt[sl], s.valid[sl])


def iterate_training_tuples(manifest: DatasetManifest, crop: tuple[int, int] | None = None,
                            seed: int = 0) -> Iterator[TrainingSample]:
    """Frame n >= 1 of every sequence, with the prior taken from the file or frame n-1's ground truth."""
    rng = np.random.default_rng(seed)
    for seq_id, entries in manifest.sequences.items():
        for n in range(1, len(entries)):
            f, before = entries[n], entries[n - 1]
            if f.disp is None:
                continue
            prior_path = f.prior or before.disp
            if prior_path is None:
                continue
            gt = read_disparity_png16(manifest.root / f.disp)
            sample = TrainingSample(
                read_image_png8(manifest.root / f.left),
                read_image_png8(manifest.root / f.right),
                read_disparity_png16(manifest.root / prior_path).values,
                gt.values,
                valid_mask(gt.values),
            )
            if crop is not None:
                h, w = sample.gt.shape
                y, x = random_crop_window(h, w, crop[0], crop[1], rng)
                sample = crop_sample(sample, y, x, *crop)
            yield sample
