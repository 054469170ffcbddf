"""Training schedule, evaluation and late fusion.

Stages of the P-stream schedule, in order:

    A mr2d       2D student on MV + residual clips, cross-entropy
    B of2d       2D teacher on flow clips, cross-entropy
    C distill2d  A distilled from frozen B
    D inflate    C and B inflated to 2D-3D, each trained with cross-entropy
    E distill3d  D student distilled from the frozen D teacher

The I-stream is trained on its own. Every stage is a pure function of its
config, its inputs and the dataset, so equal seeds give equal checkpoints.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import models
from .data import (Manifest, ManifestEntry, VideoStore, make_i_batch, make_of_clip, make_p_clip,
                   tsn_sample)
from .distill import LossConfig, cross_entropy, p_stream_loss
from .errors import InputError, TrainingError
from .models import Network, NetworkSpec, forward_stream
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.engine import Tensor, no_grad
from .tensor.optim import SGD

STAGES = ("mr2d", "of2d", "distill2d", "inflate", "distill3d")
STAGE_LETTERS = dict(zip(STAGES, "ABCDE"))
ALL_STAGES = STAGES + ("istream",)
DEFAULT_EPOCHS = {"mr2d": 20, "of2d": 20, "distill2d": 10, "inflate": 10, "distill3d": 10, "istream": 15}
# multipliers on the base learning rate; the deeper I-stream is unstable at the P-stream rate
DEFAULT_LR_SCALE = {"istream": 0.25}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "mr2d"
    epochs: int = 20
    lr: float = 0.02
    milestones: Tuple[float, ...] = (0.75,)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = LossConfig()
    inflate_at: Optional[int] = 3
    inflate_mode: str = "mean"
    temporal_padding: str = "zeros"
    n_segments: int = 8
    i_train_segments: int = 4
    crop: int = 64
    augment: bool = True

    def __post_init__(self):
        if self.stage not in ALL_STAGES:
            raise InputError(f"unknown stage {self.stage}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise InputError("epochs, batch_size and lr must be positive")

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= int(m * self.epochs) for m in self.milestones)
        return self.lr * self.lr_decay ** drops

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d


@dataclass(frozen=True)
class FusionConfig:
    w_i: float = 1.0
    w_p: float = 1.0

    def __post_init__(self):
        if self.w_i < 0 or self.w_p < 0 or self.w_i + self.w_p <= 0:
            raise InputError("fusion weights must be non-negative and not both zero")


@dataclass
class StageResult:
    name: str
    net: Network
    log: List[dict] = field(default_factory=list)
    teacher: Optional[Network] = None


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def late_fuse(scores_i, scores_p, cfg: FusionConfig = FusionConfig(), normalized: bool = False) -> np.ndarray:
    """w_i * softmax(s_i) + w_p * softmax(s_p); pass ``normalized=True`` for probabilities."""
    si, sp = np.asarray(scores_i, np.float64), np.asarray(scores_p, np.float64)
    if si.shape != sp.shape:
        raise InputError(f"score shapes differ: {si.shape} vs {sp.shape}")
    if not normalized:
        si, sp = _softmax(si), _softmax(sp)
    return cfg.w_i * si + cfg.w_p * sp


def state_digest(net: Network) -> str:
    h = hashlib.sha256()
    for k, v in net.state_dict().items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def _sample_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# --- batches ------------------------------------------------------------------

class ClipSource:
    """Assembles batches for one modality from a manifest."""

    def __init__(self, store: VideoStore, modality: str, cfg: TrainConfig):
        if modality not in ("p", "of", "i"):
            raise InputError(f"unknown modality {modality}")
        self.store, self.modality, self.cfg = store, modality, cfg

    def sample(self, entry: ManifestEntry, train: bool, seed: int, n_segments: Optional[int] = None) -> Tensor:
        video = self.store.video(entry)
        n = n_segments or self.cfg.n_segments
        plan = tsn_sample(video, n, "random" if train else "uniform", seed)
        aug = train and self.cfg.augment
        stats = self.store.norm(self.modality)
        if self.modality == "p":
            return make_p_clip(video, plan, self.cfg.crop, aug, seed, stats)
        if self.modality == "of":
            return make_of_clip(self.store.flows(entry), plan, self.cfg.crop, aug, seed, stats)
        return make_i_batch(video, plan, self.cfg.crop, aug, seed, stats)

    def batch(self, entries: Sequence[ManifestEntry], train: bool, seeds: Sequence[int],
              n_segments: Optional[int] = None) -> Tensor:
        parts = [self.sample(e, train, s, n_segments).data for e, s in zip(entries, seeds)]
        return Tensor(np.concatenate(parts, axis=0))


# --- training loop ------------------------------------------------------------

def _check_finite(loss: Tensor, stage: str, epoch: int):
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"loss became non-finite in epoch {epoch}", stage=stage)


def train_network(net: Network, manifest: Manifest, cfg: TrainConfig, modality: str, name: str,
                  teacher: Optional[Network] = None, store: Optional[VideoStore] = None,
                  progress: Optional[Callable[[dict], None]] = None) -> StageResult:
    """Supervised (optionally distilled) training of one network.

    With a teacher, the loss is the P-stream loss with ``cfg.loss``; the teacher
    sees flow clips built from the same plan and augmentation as the student
    and is run in eval mode without gradients. Its state is verified unchanged
    at the end.
    """
    store = store or VideoStore(manifest)
    train = manifest.split("train")
    if not train:
        raise InputError("manifest has no training entries")
    src = ClipSource(store, modality, cfg)
    tsrc = ClipSource(store, "of", cfg) if teacher is not None else None
    use_teacher = teacher is not None and (cfg.loss.lambda1 > 0 or cfg.loss.lambda2 > 0)
    teacher_digest = state_digest(teacher) if teacher is not None else None
    if teacher is not None:
        teacher.eval()
    net.train()
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    log = []
    stage_id = STAGE_LETTERS.get(cfg.stage, cfg.stage)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train))
        losses, correct, t0 = [], 0, time.perf_counter()
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            entries = [train[i] for i in idx]
            seeds = [_sample_seed(cfg.seed, epoch, int(i)) for i in idx]
            labels = np.array([e.label for e in entries])
            if modality == "i":
                x = src.batch(entries, True, seeds, cfg.i_train_segments)
                labels = np.repeat(labels, cfg.i_train_segments)
            else:
                x = src.batch(entries, True, seeds)
            out = forward_stream(net, x)
            if use_teacher:
                with no_grad():
                    t_out = forward_stream(teacher, tsrc.batch(entries, True, seeds))
                loss = p_stream_loss(out.logits, labels, out.feature, t_out.feature, t_out.logits, cfg.loss)
            else:
                loss = cross_entropy(out.logits, labels)
            _check_finite(loss, stage_id, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            correct += int((out.logits.data.argmax(1) == labels).sum())
        rec = {"stage": name, "epoch": epoch, "lr": opt.lr, "loss": float(np.mean(losses)),
               "first_batch_loss": losses[0], "train_acc": correct / (len(train) * (
                   cfg.i_train_segments if modality == "i" else 1)),
               "seconds": round(time.perf_counter() - t0, 3)}
        log.append(rec)
        if progress:
            progress(rec)
    if teacher is not None and state_digest(teacher) != teacher_digest:
        raise TrainingError("teacher parameters changed during distillation", stage=stage_id)
    net.eval()
    return StageResult(name, net, log, teacher)


# --- the schedule -------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    """Per-stage epochs and learning-rate multipliers plus the shared training settings."""
    base: TrainConfig = TrainConfig()
    epochs: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_EPOCHS))
    num_classes: int = 8
    lr_scale: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR_SCALE))

    def stage_cfg(self, stage: str, **kw) -> TrainConfig:
        kw.setdefault("lr", self.base.lr * self.lr_scale.get(stage, 1.0))
        return replace(self.base, stage=stage, epochs=self.epochs.get(stage, self.base.epochs), **kw)

    def p_spec(self, inflate_at) -> NetworkSpec:
        return models.p_stream_spec(self.num_classes, inflate_at, temporal_padding=self.base.temporal_padding)

    def of_spec(self, inflate_at) -> NetworkSpec:
        return models.of_teacher_spec(self.num_classes, inflate_at, temporal_padding=self.base.temporal_padding)


def _seed_for(cfg: TrainConfig, stage: str) -> int:
    return _sample_seed(cfg.seed, ALL_STAGES.index(stage) + 101)


def run_training_schedule(manifest: Manifest, sched: ScheduleConfig, stages: Sequence[str] = STAGES,
                          out_dir: Optional[Path] = None, given: Optional[Dict[str, Network]] = None,
                          store: Optional[VideoStore] = None,
                          progress: Optional[Callable[[dict], None]] = None) -> Dict[str, StageResult]:
    """Run ``stages`` in schedule order; returns networks keyed by checkpoint name.

    Keys: mr2d, of2d, distill2d, inflate (student), inflate_teacher, distill3d.
    ``given`` supplies already-trained prerequisites under the same keys.
    Checkpoints and a JSON-lines log go to ``out_dir`` when given.
    """
    stages = [s for s in STAGES if s in stages]
    store = store or VideoStore(manifest)
    nets: Dict[str, Network] = dict(given or {})
    results: Dict[str, StageResult] = {}
    base = sched.base
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    def need(key, stage):
        if key not in nets:
            raise TrainingError(f"missing prerequisite checkpoint '{key}'", stage=STAGE_LETTERS[stage])
        return nets[key]

    def finish(key, res: StageResult):
        nets[key] = res.net
        results[key] = res
        if out:
            save_network(out / f"{key}.ckpt", res.net)
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                for rec in res.log:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    for stage in stages:
        cfg = sched.stage_cfg(stage)
        seed = _seed_for(base, stage)
        if stage == "mr2d":
            net = models.build_p_stream(sched.p_spec(None), seed=seed)
            finish("mr2d", train_network(net, manifest, replace(cfg, loss=LossConfig(0, 0)), "p", "mr2d",
                                         store=store, progress=progress))
        elif stage == "of2d":
            net = models.build_of_teacher(sched.of_spec(None), inflated=False, seed=seed)
            finish("of2d", train_network(net, manifest, replace(cfg, loss=LossConfig(0, 0)), "of", "of2d",
                                         store=store, progress=progress))
        elif stage == "distill2d":
            student = _clone(need("mr2d", stage))
            teacher = need("of2d", stage) if cfg.loss.lambda1 or cfg.loss.lambda2 else None
            finish("distill2d", train_network(student, manifest, cfg, "p", "distill2d", teacher,
                                              store=store, progress=progress))
        elif stage == "inflate":
            student = models.inflate_network(need("distill2d", stage), sched.p_spec(base.inflate_at),
                                              base.inflate_mode)
            finish("inflate", train_network(student, manifest, replace(cfg, loss=LossConfig(0, 0)), "p",
                                            "inflate", store=store, progress=progress))
            if "of2d" in nets:
                t3 = models.inflate_network(nets["of2d"], sched.of_spec(base.inflate_at), base.inflate_mode)
                finish("inflate_teacher", train_network(
                    t3, manifest, replace(cfg, loss=LossConfig(0, 0), seed=cfg.seed + 1), "of",
                    "inflate_teacher", store=store, progress=progress))
        elif stage == "distill3d":
            student = _clone(need("inflate", stage))
            teacher = need("inflate_teacher", stage) if cfg.loss.lambda1 or cfg.loss.lambda2 else None
            finish("distill3d", train_network(student, manifest, cfg, "p", "distill3d", teacher,
                                              store=store, progress=progress))
    return results


def train_i_stream(manifest: Manifest, cfg: TrainConfig, store: Optional[VideoStore] = None,
                   num_classes: Optional[int] = None, progress=None) -> StageResult:
    cfg = replace(cfg, stage="istream")
    net = models.build_i_stream(models.i_stream_spec(num_classes or manifest.num_classes),
                                seed=_seed_for(cfg, "istream"))
    return train_network(net, manifest, cfg, "i", "istream", store=store, progress=progress)


def _clone(net: Network) -> Network:
    twin = models.Network(net.spec)
    return twin.load_state_dict(net.state_dict())


def save_network(path, net: Network):
    save_checkpoint(path, net.spec.descriptor(), net.state_dict())


def load_network(path) -> Network:
    desc, state = load_checkpoint(path)
    net = models.Network(models.NetworkSpec.from_descriptor(desc))
    net.load_state_dict(state)
    return net.eval()


# --- evaluation ---------------------------------------------------------------

def stream_scores(net: Network, manifest: Manifest, modality: str, split: str = "test",
                  store: Optional[VideoStore] = None, cfg: TrainConfig = TrainConfig(),
                  batch_size: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Centre-crop, uniform-sampling logits per video: (scores (V, K), labels (V,))."""
    entries = manifest.split(split)
    if not entries:
        raise InputError(f"split '{split}' is empty")
    store = store or VideoStore(manifest)
    src = ClipSource(store, modality, cfg)
    net.eval()
    scores = []
    with no_grad():
        if modality == "i":
            for e in entries:
                frames = src.sample(e, False, 0)
                scores.append(forward_stream(net, frames).logits.data.mean(axis=0))
        else:
            for start in range(0, len(entries), batch_size):
                chunk = entries[start:start + batch_size]
                x = src.batch(chunk, False, [0] * len(chunk))
                scores.extend(forward_stream(net, x).logits.data)
    return np.asarray(scores, np.float64), np.array([e.label for e in entries])


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def evaluate(manifest: Manifest, i_net: Optional[Network] = None, p_net: Optional[Network] = None,
             fusion: FusionConfig = FusionConfig(), split: str = "test",
             store: Optional[VideoStore] = None, cfg: TrainConfig = TrainConfig()) -> dict:
    """Top-1 per stream and fused, plus the confusion matrix of the final prediction."""
    if i_net is None and p_net is None:
        raise InputError("need at least one network to evaluate")
    store = store or VideoStore(manifest)
    k = manifest.num_classes
    report = {"split": split}
    si = sp = None
    if i_net is not None:
        si, labels = stream_scores(i_net, manifest, "i", split, store, cfg)
        report["top1_i"] = float((si.argmax(1) == labels).mean())
    if p_net is not None:
        modality = "of" if p_net.spec.input_channels == 2 else "p"
        sp, labels = stream_scores(p_net, manifest, modality, split, store, cfg)
        report["top1_p"] = float((sp.argmax(1) == labels).mean())
    if si is not None and sp is not None:
        fused = late_fuse(si, sp, fusion)
    else:
        fused = _softmax(si if si is not None else sp)
    pred = fused.argmax(1)
    report["top1_fused"] = float((pred == labels).mean())
    report["confusion"] = confusion_matrix(pred, labels, k).tolist()
    report["n_videos"] = int(len(labels))
    report["fuse_weights"] = [fusion.w_i, fusion.w_p]
    return report
