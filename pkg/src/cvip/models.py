"""Residual networks for the three streams.

Stage 1 is the stem (conv, BN, ReLU, 2x2 max pool); stages 2-5 are stacks of
basic residual blocks. A P-stream style network runs its early stages per frame
in 2D and, from the inflation point on, switches to 3D kernels over the clip.

``inflate_at = k`` means stages 1..k are 2D and stages k+1..5 are 3D, with two
boundary cases: k = 1 is fully 3D and k = 5 (or None) is fully 2D. The first
3D convolution halves the temporal length; later 3D stages keep it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import BuildError, InputError
from .tensor import ops
from .tensor.engine import Tensor
from .tensor.inflate import inflate_2d_to_3d
from .tensor.nn import BatchNorm, Conv, GlobalAvgPool, Linear, MaxPool, Module, ReLU, _record

N_STAGES = 5


@dataclass(frozen=True)
class NetworkSpec:
    stage_widths: Tuple[int, ...] = (8, 16, 32, 64, 128)
    blocks_per_stage: Tuple[int, ...] = (1, 1, 1, 1)  # residual stages 2..5
    input_channels: int = 5
    inflate_at: Optional[int] = 3
    num_classes: int = 8
    kt: int = 3
    temporal_padding: str = "zeros"
    kind: str = "p"

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_widths) != N_STAGES or min(self.stage_widths) < 1:
            raise BuildError(f"stage_widths needs {N_STAGES} positive entries: {self.stage_widths}")
        if len(self.blocks_per_stage) != N_STAGES - 1 or min(self.blocks_per_stage) < 1:
            raise BuildError(f"blocks_per_stage needs {N_STAGES - 1} positive entries")
        if self.inflate_at is not None and self.inflate_at not in range(1, N_STAGES + 1):
            raise BuildError(f"inflate_at must be 1..5 or None, got {self.inflate_at}")
        if self.input_channels < 1 or self.num_classes < 2 or self.kt < 1:
            raise BuildError("input_channels >= 1, num_classes >= 2 and kt >= 1 required")
        if self.temporal_padding not in ("zeros", "replicate"):
            raise BuildError(f"unknown temporal padding {self.temporal_padding}")

    def is_3d(self, stage: int) -> bool:
        k = self.inflate_at
        if k is None or k == N_STAGES:
            return False
        return k == 1 or stage > k

    @property
    def three_d_stages(self) -> List[int]:
        return [s for s in range(1, N_STAGES + 1) if self.is_3d(s)]

    @property
    def temporal_downsample(self) -> int:
        return 2 if self.three_d_stages else 1

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def descriptor(self) -> str:
        return " ".join([
            f"kind={self.kind}",
            "widths=" + ",".join(map(str, self.stage_widths)),
            "blocks=" + ",".join(map(str, self.blocks_per_stage)),
            f"in={self.input_channels}",
            f"inflate_at={self.inflate_at if self.inflate_at is not None else 'none'}",
            f"classes={self.num_classes}",
            f"kt={self.kt}",
            f"tpad={self.temporal_padding}",
        ])

    @classmethod
    def from_descriptor(cls, text: str) -> "NetworkSpec":
        try:
            kv = dict(item.split("=", 1) for item in text.split())
            return cls(
                stage_widths=tuple(int(v) for v in kv["widths"].split(",")),
                blocks_per_stage=tuple(int(v) for v in kv["blocks"].split(",")),
                input_channels=int(kv["in"]),
                inflate_at=None if kv["inflate_at"] == "none" else int(kv["inflate_at"]),
                num_classes=int(kv["classes"]),
                kt=int(kv["kt"]),
                temporal_padding=kv["tpad"],
                kind=kv["kind"],
            )
        except (KeyError, ValueError) as e:
            raise BuildError(f"bad network descriptor {text!r}: {e}") from None


def i_stream_spec(num_classes=8) -> NetworkSpec:
    return NetworkSpec((16, 32, 64, 128, 256), (2, 2, 2, 2), 3, None, num_classes, kind="i")


def p_stream_spec(num_classes=8, inflate_at: Optional[int] = 3, **kw) -> NetworkSpec:
    return NetworkSpec((8, 16, 32, 64, 128), (1, 1, 1, 1), 5, inflate_at, num_classes, kind="p", **kw)


def of_teacher_spec(num_classes=8, inflate_at: Optional[int] = None, **kw) -> NetworkSpec:
    return NetworkSpec((8, 16, 32, 64, 128), (1, 1, 1, 1), 2, inflate_at, num_classes, kind="of", **kw)


@dataclass
class StreamOutput:
    feature: Tensor
    logits: Tensor
    stages: List[Tensor] = field(default_factory=list)


def _conv(cin, cout, k, stride, three_d, kt, tpad, rng, tstride=1):
    if three_d:
        kk = (kt if k > 1 else 1, k, k)
        return Conv(cin, cout, kk, (tstride, stride, stride), (kk[0] // 2, k // 2, k // 2),
                    rng=rng, temporal_padding=tpad)
    return Conv(cin, cout, (k, k), stride, k // 2, rng=rng)


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, three_d, kt, tpad, rng, tstride=1):
        super().__init__()
        self.conv1 = _conv(cin, cout, 3, stride, three_d, kt, tpad, rng, tstride)
        self.bn1 = BatchNorm(cout)
        self.relu1 = ReLU()
        self.conv2 = _conv(cout, cout, 3, 1, three_d, kt, tpad, rng)
        self.bn2 = BatchNorm(cout)
        self.relu2 = ReLU()
        if stride != 1 or tstride != 1 or cin != cout:
            self.proj = _conv(cin, cout, 1, stride, three_d, kt, tpad, rng, tstride)
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj = None

    def forward(self, x):
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = self.proj_bn(self.proj(x)) if self.proj is not None else x
        summed = out + short
        _record("add", self, out, summed)
        return self.relu2(summed)


class Stem(Module):
    def __init__(self, cin, cout, three_d, kt, tpad, rng):
        super().__init__()
        self.conv = _conv(cin, cout, 3, 2, three_d, kt, tpad, rng, 2 if three_d else 1)
        self.bn = BatchNorm(cout)
        self.relu = ReLU()
        self.pool = MaxPool((1, 2, 2) if three_d else (2, 2))

    def forward(self, x):
        return self.pool(self.relu(self.bn(self.conv(x))))


class Network(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        rng = np.random.default_rng(seed)
        w = spec.stage_widths
        self.stage1 = Stem(spec.input_channels, w[0], spec.is_3d(1), spec.kt, spec.temporal_padding, rng)
        for s in range(2, N_STAGES + 1):
            stage = Module()
            three_d = spec.is_3d(s)
            for b in range(spec.blocks_per_stage[s - 2]):
                first = b == 0
                stride = 2 if first and s > 2 else 1
                tstride = 2 if first and three_d and not spec.is_3d(s - 1) else 1
                cin = w[s - 2] if first else w[s - 1]
                stage.add(str(b), BasicBlock(cin, w[s - 1], stride, three_d, spec.kt,
                                             spec.temporal_padding, rng, tstride))
            setattr(self, f"stage{s}", stage)
        self.pool = GlobalAvgPool()
        self.head = Linear(w[-1], spec.num_classes, rng=rng)
        self._assign_names()

    def stage(self, s: int) -> Module:
        return getattr(self, f"stage{s}")

    def forward(self, x: Tensor, keep_stages: bool = False) -> StreamOutput:
        return forward_stream(self, x, keep_stages)


def _run_stage(net: Network, s: int, x: Tensor) -> Tensor:
    if s == 1:
        return net.stage1(x)
    for _, block in net.stage(s)._children.items():
        x = block(x)
    return x


def forward_stream(net: Network, x: Tensor, keep_stages: bool = False) -> StreamOutput:
    """Frames (N, C, H, W) for a fully-2D net give one output per frame; clips
    (N, C, T, H, W) give one output per clip."""
    spec = net.spec
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim not in (4, 5) or x.shape[1] != spec.input_channels:
        raise InputError(f"expected (N, {spec.input_channels}, [T,] H, W) input, got {x.shape}")
    if x.ndim == 4 and spec.three_d_stages:
        raise InputError("a network with 3D stages needs a (N, C, T, H, W) clip")
    n = x.shape[0]
    t = x.shape[2] if x.ndim == 5 else None
    if t is not None and spec.three_d_stages and t < spec.temporal_downsample:
        raise InputError(f"clip length {t} shorter than temporal downsampling {spec.temporal_downsample}")
    if x.ndim == 5 and not spec.is_3d(1):
        x = x.transpose(0, 2, 1, 3, 4).reshape(n * t, x.shape[1], x.shape[3], x.shape[4])
    stages = []
    for s in range(1, N_STAGES + 1):
        if t is not None and spec.is_3d(s) and x.ndim == 4:
            x = x.reshape(n, t, *x.shape[1:]).transpose(0, 2, 1, 3, 4)
        x = _run_stage(net, s, x)
        if keep_stages:
            stages.append(x)
    feat = net.pool(x)
    if t is not None and x.ndim == 4:
        # fully 2D on a clip: average the per-frame features over time
        feat = feat.reshape(n, t, feat.shape[1]).mean(axis=1)
    return StreamOutput(feat, net.head(feat), stages)


def build_i_stream(spec: Optional[NetworkSpec] = None, seed: int = 0) -> Network:
    spec = spec or i_stream_spec()
    if spec.inflate_at is not None or spec.input_channels != 3:
        raise BuildError("the I-stream is a 2D network on 3-channel frames")
    return Network(spec, seed)


def build_p_stream(spec: Optional[NetworkSpec] = None, seed: int = 0) -> Network:
    spec = spec or p_stream_spec()
    if spec.input_channels != 5:
        raise BuildError("the P-stream takes 5 channels (MV dx, dy and residual RGB)")
    return Network(spec, seed)


def build_of_teacher(spec: Optional[NetworkSpec] = None, inflated: bool = False, seed: int = 0,
                     student: Optional[NetworkSpec] = None) -> Network:
    spec = spec or of_teacher_spec(inflate_at=3 if inflated else None)
    if spec.input_channels != 2:
        raise BuildError("the flow teacher takes 2 flow channels per step")
    if inflated != bool(spec.three_d_stages):
        raise BuildError(f"inflated={inflated} disagrees with inflate_at={spec.inflate_at}")
    if student is not None and student.feature_dim != spec.feature_dim:
        raise BuildError(f"teacher feature width {spec.feature_dim} != student {student.feature_dim}")
    return Network(spec, seed)


def video_scores(net: Network, frames: Tensor) -> Tensor:
    """Per-video score of a frame-level network: mean of the frame logits."""
    return forward_stream(net, frames).logits.mean(axis=0)


def inflate_network(net2d: Network, spec3d: NetworkSpec, mode: str = "mean", seed: int = 0) -> Network:
    """Build ``spec3d`` and initialise it from a 2D network of the same widths.

    2D kernels that became 3D are inflated with the spec's kt; everything else,
    batch-norm statistics included, is copied verbatim.
    """
    src = net2d.spec
    if (src.stage_widths, src.blocks_per_stage, src.input_channels, src.num_classes) != (
            spec3d.stage_widths, spec3d.blocks_per_stage, spec3d.input_channels, spec3d.num_classes):
        raise BuildError("inflation needs matching widths, blocks, input channels and classes")
    if src.three_d_stages:
        raise BuildError("source network must be fully 2D")
    out = Network(spec3d, seed)
    state = {}
    target = out.state_dict()
    for k, v in net2d.state_dict().items():
        if target[k].ndim == 5 and v.ndim == 4:
            v = inflate_2d_to_3d(v, target[k].shape[2], mode)
        state[k] = v
    return out.load_state_dict(state)


def with_inflation(spec: NetworkSpec, inflate_at: Optional[int], **kw) -> NetworkSpec:
    return replace(spec, inflate_at=inflate_at, **kw)


def count_parameters(net: Module) -> int:
    return int(sum(p.size for p in net.parameters()))


def stage_kernel_ranks(net: Network) -> List[int]:
    """Kernel rank (4 for 2D, 5 for 3D) of the first conv of each stage."""
    ranks = []
    for s in range(1, N_STAGES + 1):
        convs = [m for _, m in net.stage(s).named_modules() if isinstance(m, Conv)]
        ranks.append(convs[0].weight.ndim)
    return ranks
