"""Frame sampling, clip assembly, the synthetic sprite dataset and manifests.

Dataset layout under a root directory::

    manifest.tsv                # '#' header lines + <path>\t<label>\t<split>
    videos/<name>.gvc           # encoded video
    flows/<name>.flo/pair_*.flo # flow of every consecutive frame pair

Class design: the first half of the classes differ only in sprite appearance
and share one trajectory family (circular, random phase and direction); the
rest share one sprite and differ only in the temporal pattern of the motion.
Motion patterns are defined by the order of segments (horizontal then
vertical, move then stop, ...) with random direction signs, so they survive
horizontal flips and cannot be told apart from per-frame statistics alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .codec import Frame, GopVideo, encode_gop_video, mv_to_dense, read_gvc, write_gvc
from .errors import InputError
from .flow import FlowParams, read_flow_dir, video_flows, write_flow_dir
from .imaging import resize_bilinear, resize_nearest
from .tensor.engine import Tensor

MANIFEST_NAME = "manifest.tsv"
MANIFEST_VERSION = "cvip-manifest v1"
WORKING_SIZE = (64, 85)  # (height, width) before cropping
CROP = 64

# ordered so that the first few silhouettes stay distinct even in smoothed flow
SHAPES = ("bar", "cross", "disk", "triangle", "square", "diamond")
MOTIONS = ("hv", "vh", "move_stop", "stop_move", "msm", "sms")
# Every sprite colour is far from the background grey in
# luminance, so sprites stay visible to the (greyscale) flow estimator.
SHAPE_COLORS = [(255, 120, 110), (90, 230, 100), (20, 30, 150), (240, 220, 60), (235, 110, 235), (60, 220, 220)]
MOTION_SPRITE_COLOR = (235, 140, 40)
# The library default smoothness flattens the flow of the small sprites towards
# zero. This much lighter setting recovers sprite motion to about 0.2 px
# endpoint error, at the price of some low-amplitude background flow.
DATASET_FLOW_PARAMS = FlowParams(smoothness_weight=0.01, outer_warps=4, inner_iterations=15, pyramid_levels=3)


# --- sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SamplePlan:
    n_segments: int
    i_indices: Tuple[int, ...]
    p_indices: Tuple[int, ...]
    mode: str
    segments: Tuple[Tuple[int, int], ...] = ()


def segment_bounds(frame_count: int, n_segments: int) -> List[Tuple[int, int]]:
    return [(k * frame_count // n_segments, (k + 1) * frame_count // n_segments) for k in range(n_segments)]


def _nearest(valid: np.ndarray, center: int) -> int:
    # ties resolve toward the earlier frame
    return int(valid[np.argmin(np.abs(valid - center) * 2 + (valid > center))])


def tsn_sample(video: Union[GopVideo, int], n_segments: int = 16, mode: str = "uniform",
               seed: int = 0, gop_size: Optional[int] = None) -> SamplePlan:
    """One I-frame and one P-frame index per equal segment.

    ``video`` may be a GopVideo or a frame count (then ``gop_size`` is needed).
    Uniform mode takes the valid frame closest to the segment centre; random
    mode draws uniformly among the segment's valid frames. A segment without a
    frame of the needed type borrows the nearest one in the whole video.
    """
    if isinstance(video, GopVideo):
        count, gop = video.frame_count, video.gop_size
    else:
        count, gop = int(video), gop_size
        if gop is None:
            raise InputError("gop_size is required with a bare frame count")
    if mode not in ("uniform", "random"):
        raise InputError(f"mode must be uniform or random, got {mode}")
    if n_segments < 1 or n_segments > count:
        raise InputError(f"need 1 <= n_segments <= {count}, got {n_segments}")
    idx = np.arange(count)
    is_i = idx % gop == 0
    if is_i.all():
        raise InputError("video has no P-frames")
    rng = np.random.default_rng(seed)
    bounds = segment_bounds(count, n_segments)
    picks = {True: [], False: []}
    for lo, hi in bounds:
        center = lo + (hi - lo) // 2
        for want_i in (True, False):
            inside = idx[lo:hi][is_i[lo:hi] == want_i]
            if inside.size and mode == "random":
                picks[want_i].append(int(rng.choice(inside)))
            elif inside.size:
                picks[want_i].append(_nearest(inside, center))
            else:
                picks[want_i].append(_nearest(idx[is_i == want_i], center))
    return SamplePlan(n_segments, tuple(picks[True]), tuple(picks[False]), mode, tuple(bounds))


# --- normalisation and augmentation -----------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray, axis: int) -> np.ndarray:
        shape = [1] * x.ndim
        shape[axis] = -1
        return ((x - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(np.float32)

    def to_text(self) -> str:
        return "mean=" + ",".join(f"{v:.8g}" for v in self.mean) + " std=" + ",".join(f"{v:.8g}" for v in self.std)

    @classmethod
    def from_text(cls, text: str) -> "NormStats":
        kv = dict(part.split("=", 1) for part in text.split())
        return cls(np.array([float(v) for v in kv["mean"].split(",")]),
                   np.array([float(v) for v in kv["std"].split(",")]))

    @classmethod
    def identity(cls, channels: int) -> "NormStats":
        return cls(np.zeros(channels), np.ones(channels))


@dataclass(frozen=True)
class Augment:
    y0: int
    x0: int
    crop_h: int
    crop_w: int
    flip: bool


def augment_params(height: int, width: int, crop: Optional[int], augment: bool, seed: int) -> Augment:
    """Centre crop without augmentation, otherwise a seeded random crop and flip."""
    ch, cw = (height, width) if crop is None else (crop, crop)
    if ch > height or cw > width:
        raise InputError(f"crop {crop} larger than frame {height}x{width}")
    if not augment:
        return Augment((height - ch) // 2, (width - cw) // 2, ch, cw, False)
    rng = np.random.default_rng(seed)
    return Augment(int(rng.integers(0, height - ch + 1)), int(rng.integers(0, width - cw + 1)), ch, cw,
                   bool(rng.random() < 0.5))


def _vector_planes(planes: np.ndarray, size, nearest: bool) -> np.ndarray:
    """Resize (T, 2, H, W) displacement planes and rescale them to the new pixel grid."""
    h, w = planes.shape[-2:]
    if size is None or tuple(size) == (h, w):
        return planes.astype(np.float32)
    out = (resize_nearest if nearest else resize_bilinear)(planes, size[0], size[1]).astype(np.float32)
    out[:, 0] *= size[1] / w
    out[:, 1] *= size[0] / h
    return out


def _crop_flip(x: np.ndarray, aug: Augment, dx_channel: Optional[int], channel_axis: int) -> np.ndarray:
    x = x[..., aug.y0:aug.y0 + aug.crop_h, aug.x0:aug.x0 + aug.crop_w]
    if aug.flip:
        x = x[..., ::-1].copy()
        if dx_channel is not None:
            idx = [slice(None)] * x.ndim
            idx[channel_axis] = dx_channel
            x[tuple(idx)] *= -1
    return np.ascontiguousarray(x)


def _check_plan(video: GopVideo, plan: SamplePlan):
    for k in plan.p_indices:
        if not 0 <= k < video.frame_count or video.is_i_frame(k):
            raise InputError(f"plan index {k} is not a P-frame of this video")
    for k in plan.i_indices:
        if not 0 <= k < video.frame_count or not video.is_i_frame(k):
            raise InputError(f"plan index {k} is not an I-frame of this video")


def make_p_clip(video: GopVideo, plan: SamplePlan, crop: Optional[int] = CROP, augment: bool = False,
                seed: int = 0, stats: Optional[NormStats] = None,
                size: Optional[Tuple[int, int]] = WORKING_SIZE) -> Tensor:
    """(1, 5, T, H, W) clip of [MV dx, MV dy, R r, R g, R b] for the plan's P-frames."""
    _check_plan(video, plan)
    mv = np.stack([mv_to_dense(video.frames[k][0], video.width, video.height) for k in plan.p_indices])
    res = np.stack([np.moveaxis(video.frames[k][1].data, -1, 0) for k in plan.p_indices]).astype(np.float32)
    mv = _vector_planes(mv, size, nearest=True)
    if size is not None and tuple(size) != res.shape[-2:]:
        res = resize_bilinear(res, size[0], size[1]).astype(np.float32)
    x = np.concatenate([mv, res], axis=1)  # (T, 5, H, W)
    aug = augment_params(x.shape[-2], x.shape[-1], crop, augment, seed)
    x = _crop_flip(x, aug, 0, 1)
    x = (stats or NormStats.identity(5)).apply(x, 1)
    return Tensor(np.moveaxis(x, 1, 0)[None])


def make_of_clip(flows: np.ndarray, plan: SamplePlan, crop: Optional[int] = CROP, augment: bool = False,
                 seed: int = 0, stats: Optional[NormStats] = None,
                 size: Optional[Tuple[int, int]] = WORKING_SIZE) -> Tensor:
    """(1, 2, T, H, W) teacher clip: the flow into each sampled P-frame from its
    predecessor. With the same seed the crop and flip match ``make_p_clip``."""
    if max(plan.p_indices) > flows.shape[0] or min(plan.p_indices) < 1:
        raise InputError("plan does not fit the flow stack")
    x = _vector_planes(flows[[k - 1 for k in plan.p_indices]], size, nearest=False)
    aug = augment_params(x.shape[-2], x.shape[-1], crop, augment, seed)
    x = _crop_flip(x, aug, 0, 1)
    x = (stats or NormStats.identity(2)).apply(x, 1)
    return Tensor(np.moveaxis(x, 1, 0)[None])


def make_i_batch(video: GopVideo, plan: SamplePlan, crop: Optional[int] = CROP, augment: bool = False,
                 seed: int = 0, stats: Optional[NormStats] = None,
                 size: Optional[Tuple[int, int]] = WORKING_SIZE) -> Tensor:
    """(T, 3, H, W) batch of the plan's I-frames scaled to [0, 1] then normalised."""
    _check_plan(video, plan)
    x = np.stack([np.moveaxis(video.frames[k].data, -1, 0) for k in plan.i_indices]).astype(np.float32) / 255.0
    if size is not None and tuple(size) != x.shape[-2:]:
        x = resize_bilinear(x, size[0], size[1]).astype(np.float32)
    aug = augment_params(x.shape[-2], x.shape[-1], crop, augment, seed)
    x = _crop_flip(x, aug, None, 1)
    return Tensor((stats or NormStats.identity(3)).apply(x, 1))


# --- synthetic videos -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    classes: int = 8
    clips_per_class: int = 25
    frames: int = 32
    size: int = 64
    test_per_class: int = 10
    gop_size: int = 12
    sprite_radius: float = 11.0
    speed: float = 2.0  # pixels per frame
    noise_sigma: float = 3.0
    background: float = 100.0
    background_contrast: float = 30.0
    background_smoothness: float = 4.0  # gaussian sigma of the texture, pixels

    def __post_init__(self):
        if self.classes < 2:
            raise InputError("need at least 2 classes")
        n_app, n_mot = split_classes(self.classes)
        if n_app > len(SHAPES) or n_mot > len(MOTIONS):
            raise InputError(f"at most {len(SHAPES) + len(MOTIONS)} classes are supported")
        if self.clips_per_class < 2 or not 1 <= self.test_per_class < self.clips_per_class:
            raise InputError("clips_per_class must exceed test_per_class >= 1")
        if self.frames < 2 or self.gop_size < 2:
            raise InputError("need at least two frames")
        if self.size < 16 or self.size % 16:
            raise InputError("size must be a positive multiple of 16")


def split_classes(n: int) -> Tuple[int, int]:
    """(appearance classes, motion classes): appearance gets the extra one if n is odd."""
    return n - n // 2, n // 2


def class_kind(label: int, n_classes: int) -> Tuple[str, str]:
    n_app, _ = split_classes(n_classes)
    if label < n_app:
        return "appearance", SHAPES[label]
    return "motion", MOTIONS[label - n_app]


def _shape_distance(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if shape == "square":
        return np.maximum(au, av) - r * 0.85
    if shape == "disk":
        return np.hypot(u, v) - r
    if shape == "diamond":
        return (au + av) / math.sqrt(2) - r * 0.8
    if shape == "cross":
        arm = r * 0.35
        return np.minimum(np.maximum(au - r, av - arm), np.maximum(au - arm, av - r))
    if shape == "triangle":
        # upward-pointing equilateral triangle with inradius r / 2
        return np.maximum(v, 0.866 * au - 0.5 * v) - r * 0.5
    if shape == "bar":
        return np.maximum(au - r, av - r * 0.45)
    if shape == "ring":
        return np.abs(np.hypot(u, v) - r * 0.7) - r * 0.3
    raise InputError(f"unknown shape {shape}")


def _render(shape, color, cx, cy, cfg: SyntheticConfig, yy, xx):
    n = cfg.size
    u = (xx - cx + n / 2) % n - n / 2  # wrap-around (toroidal) coordinates
    v = (yy - cy + n / 2) % n - n / 2
    alpha = np.clip(0.5 - _shape_distance(shape, u, v, cfg.sprite_radius), 0.0, 1.0)
    tex = 0.75 + 0.25 * np.sin(2 * np.pi * u / 5.0) * np.cos(2 * np.pi * v / 5.0)
    return alpha, tex[..., None] * np.asarray(color, np.float64)


def _trajectory(kind: str, name: str, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """(frames, 2) sprite centre positions (x, y)."""
    f, n, v = cfg.frames, cfg.size, cfg.speed
    t = np.arange(f, dtype=np.float64)
    start = rng.uniform(0, n, 2)
    if kind == "appearance":
        radius = 10.0
        omega = v / radius * rng.choice([-1.0, 1.0])
        phase = rng.uniform(0, 2 * np.pi)
        return start + radius * np.stack([np.cos(phase + omega * t), np.sin(phase + omega * t)], 1)
    signs = rng.choice([-1.0, 1.0], 2)
    axis = int(rng.integers(0, 2))
    step = np.zeros((f, 2))
    half, third = f // 2, f // 3
    if name == "hv":
        step[:half, 0], step[half:, 1] = signs[0] * v, signs[1] * v
    elif name == "vh":
        step[:half, 1], step[half:, 0] = signs[1] * v, signs[0] * v
    elif name == "move_stop":
        step[:half, axis] = signs[0] * v
    elif name == "stop_move":
        step[half:, axis] = signs[0] * v
    elif name == "msm":
        step[:third, axis], step[2 * third:, axis] = signs[0] * v, signs[1] * v
    elif name == "sms":
        step[third:2 * third, axis] = signs[0] * v * 2
    else:
        raise InputError(f"unknown motion pattern {name}")
    return start + np.concatenate([np.zeros((1, 2)), np.cumsum(step[:-1], axis=0)])


def render_video(label: int, cfg: SyntheticConfig, rng: np.random.Generator) -> List[Frame]:
    kind, name = class_kind(label, cfg.classes)
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    if kind == "appearance":
        shape, color = name, SHAPE_COLORS[SHAPES.index(name)]
    else:
        shape, color = "ring", MOTION_SPRITE_COLOR
    pos = _trajectory(kind, name, cfg, rng)
    bg = ndimage.gaussian_filter(rng.normal(size=(n, n)), cfg.background_smoothness, mode="wrap")
    bg = cfg.background + cfg.background_contrast * bg / (np.abs(bg).max() + 1e-12)
    frames = []
    for x, y in pos:
        alpha, sprite = _render(shape, color, x, y, cfg, yy, xx)
        img = bg[..., None] * (1 - alpha[..., None]) + sprite * alpha[..., None]
        img = img + rng.normal(0, cfg.noise_sigma, img.shape)
        frames.append(Frame(np.clip(np.rint(img), 0, 255).astype(np.uint8)))
    return frames


# --- manifest ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: Path
    label: int
    split: str

    @property
    def flow_dir(self) -> Path:
        return self.path.parent.parent / "flows" / (self.path.stem + ".flo")


@dataclass
class Manifest:
    root: Path
    entries: List[ManifestEntry]
    num_classes: int
    norm: Dict[str, NormStats] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def write(self, path: Optional[Path] = None) -> Path:
        path = Path(path or self.root / MANIFEST_NAME)
        lines = [f"# {MANIFEST_VERSION}", f"# classes {self.num_classes}"]
        lines += [f"# meta {k} {v}" for k, v in self.meta.items()]
        lines += [f"# norm {k} {s.to_text()}" for k, s in self.norm.items()]
        for e in self.entries:
            lines.append(f"{e.path.relative_to(self.root).as_posix()}\t{e.label}\t{e.split}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def load_manifest(path: Union[str, Path], check_files: bool = True) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise InputError(f"no manifest at {path}")
    root = path.parent
    entries, norm, meta, classes = [], {}, {}, None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split(None, 2)
            if parts and parts[0] == "classes":
                classes = int(parts[1])
            elif parts and parts[0] == "norm" and len(parts) == 3:
                norm[parts[1]] = NormStats.from_text(parts[2])
            elif parts and parts[0] == "meta" and len(parts) == 3:
                meta[parts[1]] = parts[2]
            continue
        cols = line.split("\t")
        if len(cols) != 3 or cols[2] not in ("train", "test"):
            raise InputError(f"{path}:{lineno}: expected <path>\\t<label>\\t<train|test>")
        entry = ManifestEntry(root / cols[0], int(cols[1]), cols[2])
        if check_files and not entry.path.exists():
            raise InputError(f"{path}:{lineno}: missing video {entry.path}")
        entries.append(entry)
    if classes is None:
        classes = max(e.label for e in entries) + 1 if entries else 0
    bad = [e for e in entries if not 0 <= e.label < classes]
    if bad:
        raise InputError(f"label {bad[0].label} outside 0..{classes - 1}")
    return Manifest(root, entries, classes, norm, meta)


def _stats(chunks: Sequence[np.ndarray], axis: int) -> NormStats:
    """Per-channel mean and std over a list of arrays sharing the channel axis."""
    moved = [np.moveaxis(c, axis, 0).reshape(c.shape[axis], -1).astype(np.float64) for c in chunks]
    total = np.concatenate(moved, axis=1)
    std = total.std(axis=1)
    return NormStats(total.mean(axis=1), np.where(std > 1e-6, std, 1.0))


def generate_synthetic_dataset(out_dir: Union[str, Path], cfg: SyntheticConfig = SyntheticConfig(),
                               seed: int = 7, flow_params: FlowParams = DATASET_FLOW_PARAMS,
                               with_flows: bool = True) -> Manifest:
    """Render, encode and (optionally) compute flows for every clip; write the manifest.

    Output is a pure function of (cfg, seed): every clip uses its own child
    seed, and normalisation statistics come from the training split.
    """
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(cfg.classes * cfg.clips_per_class)
    entries = []
    p_chunks, i_chunks, f_chunks = [], [], []
    for label in range(cfg.classes):
        for j in range(cfg.clips_per_class):
            rng = np.random.default_rng(children[label * cfg.clips_per_class + j])
            frames = render_video(label, cfg, rng)
            gv = encode_gop_video(frames, gop_size=cfg.gop_size, label=label)
            name = f"c{label:02d}_{j:03d}"
            path = out / "videos" / f"{name}.gvc"
            write_gvc(gv, path)
            split = "test" if j >= cfg.clips_per_class - cfg.test_per_class else "train"
            entry = ManifestEntry(path, label, split)
            entries.append(entry)
            flows = None
            if with_flows:
                flows = video_flows(frames, flow_params)
                write_flow_dir(entry.flow_dir, flows)
            if split == "train":
                p_idx = gv.p_indices
                mv = np.stack([mv_to_dense(gv.frames[k][0], gv.width, gv.height) for k in p_idx])
                res = np.stack([np.moveaxis(gv.frames[k][1].data, -1, 0) for k in p_idx])
                p_chunks.append(np.concatenate([mv, res.astype(np.float32)], axis=1))
                i_chunks.append(np.stack([np.moveaxis(gv.frames[k].data, -1, 0) for k in gv.i_indices]) / 255.0)
                if flows is not None:
                    f_chunks.append(flows[[k - 1 for k in p_idx]])
    norm = {"p": _stats(p_chunks, 1), "i": _stats(i_chunks, 1)}
    if f_chunks:
        norm["of"] = _stats(f_chunks, 1)
    meta = {"seed": str(seed), "frames": str(cfg.frames), "size": str(cfg.size),
            "clips_per_class": str(cfg.clips_per_class), "gop": str(cfg.gop_size)}
    manifest = Manifest(out, entries, cfg.classes, norm, meta)
    manifest.write()
    return manifest


class VideoStore:
    """Caches decoded containers and flow stacks of a manifest in memory."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._videos: Dict[Path, GopVideo] = {}
        self._flows: Dict[Path, np.ndarray] = {}

    def video(self, entry: ManifestEntry) -> GopVideo:
        if entry.path not in self._videos:
            self._videos[entry.path] = read_gvc(entry.path)
        return self._videos[entry.path]

    def flows(self, entry: ManifestEntry) -> np.ndarray:
        if entry.path not in self._flows:
            if not entry.flow_dir.exists():
                raise InputError(f"no flows for {entry.path}; regenerate the dataset with flows")
            self._flows[entry.path] = read_flow_dir(entry.flow_dir)
        return self._flows[entry.path]

    def norm(self, key: str) -> Optional[NormStats]:
        return self.manifest.norm.get(key)
