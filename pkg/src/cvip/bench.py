"""Analytic FLOP counting and wall-clock throughput.

FLOP convention: conv and linear layers cost 2 FLOPs per multiply-accumulate,
where MACs = output elements x input channels x kernel volume (padded taps
included). Batch norm, ReLU, pooling and residual additions cost 1 FLOP per
input element. Counts cover the whole input passed in, batch included.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .codec import read_gvc
from .data import Manifest, make_i_batch, make_p_clip, tsn_sample
from .errors import BenchError, InputError
from .models import Network, forward_stream
from .tensor.engine import Tensor, no_grad
from .tensor.nn import profile

ELEMENTWISE = ("bn", "relu", "pool", "add")


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    flops: int


@dataclass
class CostReport:
    layers: List[LayerCost] = field(default_factory=list)
    totals: Dict[str, int] = field(default_factory=dict)  # flops per stream
    vps: Optional[float] = None
    timing: Dict[str, float] = field(default_factory=dict)  # median seconds per video

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_macs"], d["total_flops"] = self.total_macs, self.total_flops
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def layer_cost(rec: dict) -> LayerCost:
    """Cost of one profiler record (see ``tensor.nn.profile``)."""
    kind = rec["kind"]
    if kind == "conv":
        w = rec["weight_shape"]
        macs = int(np.prod(rec["out_shape"])) * int(np.prod(w[1:]))
        return LayerCost(rec["name"], kind, macs, 2 * macs)
    if kind == "linear":
        out_f, in_f = rec["weight_shape"]
        macs = int(np.prod(rec["out_shape"][:-1])) * out_f * in_f
        return LayerCost(rec["name"], kind, macs, 2 * macs)
    if kind in ELEMENTWISE:
        return LayerCost(rec["name"], kind, 0, int(np.prod(rec["in_shape"])))
    raise InputError(f"no cost rule for layer kind {kind}")


def count_flops(net: Network, input_shape: Sequence[int], batch: int = 1) -> CostReport:
    """Run a zero input through ``net`` and cost every recorded layer.

    ``input_shape`` excludes the batch axis: (C, H, W) for frames, (C, T, H, W)
    for clips. ``batch`` frames or clips are costed together.
    """
    shape = tuple(int(s) for s in input_shape)
    if len(shape) not in (3, 4) or min(shape) < 1 or batch < 1:
        raise InputError(f"input shape must be (C, H, W) or (C, T, H, W), got {shape}")
    if shape[0] != net.spec.input_channels:
        raise InputError(f"network takes {net.spec.input_channels} channels, shape has {shape[0]}")
    was_training = net.training
    net.eval()
    try:
        with no_grad(), profile() as records:
            forward_stream(net, Tensor(np.zeros((batch,) + shape)))
    finally:
        net.train(was_training)
    layers = [layer_cost(r) for r in records]
    report = CostReport(layers)
    report.totals[net.spec.kind] = report.total_flops
    return report


# --- timing -------------------------------------------------------------------

def _runner(net) -> Callable[[Tensor], object]:
    if isinstance(net, Network):
        net.eval()
        return lambda x: forward_stream(net, x)
    return net


def _median_times(fn: Callable[[], Dict[str, float]], reps: int, warmup: int) -> Dict[str, float]:
    warm = [sum(fn().values()) for _ in range(warmup)]
    if len(warm) >= 2:
        spread = (max(warm) - min(warm)) / max(statistics.median(warm), 1e-12)
        if spread > 0.5:
            raise BenchError(f"warmup timings vary by {spread:.0%}; machine is not quiet enough")
    runs = [fn() for _ in range(reps)]
    return {k: statistics.median(r[k] for r in runs) for k in runs[0]}


def measure_vps(i_net, p_net, dataset: Manifest, reps: int = 10, warmup: int = 2,
                n_segments: int = 16, split: str = "test") -> CostReport:
    """Median per-video seconds for preprocessing, I-stream and P-stream.

    Preprocessing reads the container and builds both inputs; the I-stream sees
    a batch of ``n_segments`` frames and the P-stream one clip of that length.
    Either network may be a plain callable taking the input tensor.
    """
    if reps < 3 or warmup < 1:
        raise InputError("need reps >= 3 and warmup >= 1")
    entries = dataset.split(split) or dataset.entries
    if not entries:
        raise InputError("dataset has no videos")
    run_i, run_p = _runner(i_net), _runner(p_net)
    stats_i, stats_p = dataset.norm.get("i"), dataset.norm.get("p")
    state = {"n": 0}

    def one_video():
        entry = entries[state["n"] % len(entries)]
        state["n"] += 1
        t0 = time.perf_counter()
        video = read_gvc(entry.path)
        plan = tsn_sample(video, n_segments, "uniform")
        frames = make_i_batch(video, plan, stats=stats_i)
        clip = make_p_clip(video, plan, stats=stats_p)
        t1 = time.perf_counter()
        with no_grad():
            run_i(frames)
            t2 = time.perf_counter()
            run_p(clip)
            t3 = time.perf_counter()
        return {"preprocessing": t1 - t0, "i_stream": t2 - t1, "p_stream": t3 - t2}

    timing = _median_times(one_video, reps, warmup)
    total = sum(timing.values())
    if not total > 0:
        raise BenchError("measured a non-positive time per video")
    return CostReport(timing=timing, vps=1.0 / total)
